//! Counter-derived random substreams.
//!
//! Every random draw in the library comes from a ChaCha8 generator keyed by
//! `(seed, t, slot)`, so per-particle work can be reordered or parallelized
//! without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Slot reserved for the resampling uniform at each time step.
pub const RESAMPLE_SLOT: u64 = u64::MAX;
/// Slot reserved for initial-state draws.
pub const INIT_SLOT: u64 = u64::MAX - 1;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, t, slot)`.
pub fn substream(seed: u64, t: u64, slot: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ t) ^ slot);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(t);
    rng
}

/// Independent seed derived from `seed` and a purpose tag, e.g. to keep
/// simulated data and filter randomness apart.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(tag) ^ seed)
}
