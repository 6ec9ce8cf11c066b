//! Seeded synthetic data for any [`ModelSpec`].

use crate::em::{InitialMode, InitialState};
use crate::error::{Error, Result};
use crate::model::{ModeId, ModelSpec, Theta};
use crate::rbpf::sample_index;
use crate::rng::{substream, INIT_SLOT};

/// States `x_{0:n}`, modes `r_{0:n}` and observations `y_{1:n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vec<f64>>,
    pub r: Vec<ModeId>,
    pub y: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of observations.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Draws `r_t ~ Pi(r_{t-1}, .)`, `x_t ~ f_{r_t}(. | x_{t-1})` and
/// `y_t ~ g_{r_t}(. | x_t)` for `t = 1..=n`. Step `t` only consumes the
/// `(seed, t, 0)` substream, so prefixes agree across different `n`.
pub fn simulate<M: ModelSpec>(
    model: &M,
    theta: &Theta<M::Params>,
    n: usize,
    x0: &InitialState,
    r0: &InitialMode,
    seed: u64,
) -> Result<Trajectory> {
    let k_modes = model.num_modes();
    if theta.num_modes() != k_modes {
        return Err(Error::Dimension(format!("parameter has {} modes, model has {k_modes}", theta.num_modes())));
    }
    if x0.dim() != model.state_dim() {
        return Err(Error::Dimension(format!("initial state has dimension {}", x0.dim())));
    }
    let dx = model.state_dim();
    let dy = model.meas_dim();
    let first = x0.draw(1, seed)?.remove(0);
    let mut init_rng = substream(seed, 0, INIT_SLOT);
    let first_mode = sample_index(&r0.probabilities(k_modes)?, &mut init_rng);

    let mut x = Vec::with_capacity(n + 1);
    let mut r = Vec::with_capacity(n + 1);
    let mut y = Vec::with_capacity(n);
    x.push(first);
    r.push(ModeId::from_index(first_mode));
    for t in 1..=n {
        let mut rng = substream(seed, t as u64, 0);
        let k = sample_index(theta.tpm.row(r[t - 1].index()), &mut rng);
        let mut xt = vec![0.0; dx];
        model.sample_transition(k, t, &x[t - 1], &theta.modes[k], &mut rng, &mut xt);
        let mut yt = vec![0.0; dy];
        model.sample_measurement(k, t, &xt, &theta.modes[k], &mut rng, &mut yt);
        x.push(xt);
        r.push(ModeId::from_index(k));
        y.push(yt);
    }
    Ok(Trajectory { x, r, y, seed })
}
