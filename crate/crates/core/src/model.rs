//! Model abstraction for jump Markov nonlinear systems.
//!
//! A model is a family of per-mode transition densities `f_k(x_t | x_{t-1})`
//! and measurement densities `g_k(y_t | x_t)` whose product is a curved
//! exponential family in the per-mode parameters. The library never needs
//! the natural parameters themselves: it only needs the per-mode sufficient
//! statistic and the closed-form maximizer that maps smoothed statistics back
//! to parameters.

use std::fmt;
use std::ops::Range;

use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-based mode label as it appears in files and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeId(u32);

impl ModeId {
    pub fn new(value: u32, num_modes: usize) -> Result<Self> {
        if value == 0 || value as usize > num_modes {
            return Err(Error::Domain(format!("mode {value} outside 1..={num_modes}")));
        }
        Ok(Self(value))
    }

    /// Label for a zero-based index.
    pub fn from_index(index: usize) -> Self {
        Self(index as u32 + 1)
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic `K x K` matrix of mode transition probabilities;
/// entry `(k, l)` is `P(r_t = l | r_{t-1} = k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TransitionMatrix {
    modes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    /// Validates non-negativity and unit row sums (within `1e-9`), then
    /// renormalizes rows exactly.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let modes = rows.len();
        if modes == 0 {
            return Err(Error::Domain("transition matrix needs at least one mode".into()));
        }
        let mut entries = Vec::with_capacity(modes * modes);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != modes {
                return Err(Error::Dimension(format!(
                    "transition row {} has {} entries, expected {modes}",
                    k + 1,
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Domain(format!("transition row {} has a negative or non-finite entry", k + 1)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("transition row {} sums to {sum}", k + 1)));
            }
            entries.extend(row.iter().map(|p| p / sum));
        }
        Ok(Self { modes, entries })
    }

    pub fn identity(modes: usize) -> Self {
        let mut entries = vec![0.0; modes * modes];
        for k in 0..modes {
            entries[k * modes + k] = 1.0;
        }
        Self { modes, entries }
    }

    pub fn uniform(modes: usize) -> Self {
        Self { modes, entries: vec![1.0 / modes as f64; modes * modes] }
    }

    pub fn num_modes(&self) -> usize {
        self.modes
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.modes + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.modes..(from + 1) * self.modes]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.modes).map(<[f64]>::to_vec).collect()
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    /// Rows are assumed row-stochastic already.
    pub(crate) fn from_flat_unchecked(modes: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), modes * modes);
        Self { modes, entries }
    }
}

impl TryFrom<Vec<Vec<f64>>> for TransitionMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<TransitionMatrix> for Vec<Vec<f64>> {
    fn from(m: TransitionMatrix) -> Self {
        m.rows()
    }
}

/// Projection bounds applied by the M-step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeasibilityConfig {
    /// Smallest admissible covariance eigenvalue.
    pub var_floor: f64,
    /// Largest admissible covariance eigenvalue; `None` means unbounded.
    pub var_cap: Option<f64>,
    /// Smallest admissible transition probability.
    pub tpm_floor: f64,
    /// Occupancy mass below which a mode keeps its previous parameters.
    pub occupancy_floor: f64,
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        Self { var_floor: 1e-6, var_cap: None, tpm_floor: 1e-6, occupancy_floor: 1e-8 }
    }
}

impl FeasibilityConfig {
    pub fn clamp_variance(&self, v: f64) -> f64 {
        let v = v.max(self.var_floor);
        match self.var_cap {
            Some(cap) => v.min(cap),
            None => v,
        }
    }
}

/// Full parameter: per-mode parameters and the transition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "P: Serialize", deserialize = "P: DeserializeOwned"))]
pub struct Theta<P> {
    pub tpm: TransitionMatrix,
    pub modes: Vec<P>,
}

impl<P> Theta<P> {
    pub fn new(modes: Vec<P>, tpm: TransitionMatrix) -> Result<Self> {
        if modes.len() != tpm.num_modes() {
            return Err(Error::Dimension(format!(
                "{} mode parameter sets for a {}-mode transition matrix",
                modes.len(),
                tpm.num_modes()
            )));
        }
        Ok(Self { tpm, modes })
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }
}

/// Behavioral description of a jump Markov nonlinear system.
///
/// Mode indices are zero-based. `t` is the one-based time index of the new
/// state `x_t`, so time-inhomogeneous dynamics can be expressed.
pub trait ModelSpec: Send + Sync {
    /// Per-mode parameter `theta_k`.
    type Params: Clone + fmt::Debug + PartialEq + Send + Sync + Serialize + DeserializeOwned;

    fn num_modes(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;

    /// `log f_k(x_next | x_prev)`.
    fn log_trans_density(&self, k: usize, t: usize, x_next: &[f64], x_prev: &[f64], p: &Self::Params) -> f64;

    /// `log g_k(y | x)`.
    fn log_meas_density(&self, k: usize, t: usize, y: &[f64], x: &[f64], p: &Self::Params) -> f64;

    fn sample_transition(
        &self,
        k: usize,
        t: usize,
        x_prev: &[f64],
        p: &Self::Params,
        rng: &mut dyn RngCore,
        out: &mut [f64],
    );

    fn sample_measurement(&self, k: usize, t: usize, x: &[f64], p: &Self::Params, rng: &mut dyn RngCore, out: &mut [f64]);

    /// Length of the mode-`k` sufficient statistic.
    fn suffstat_dim(&self, k: usize) -> usize;

    /// Writes `s_{k,t}(y, x_next, x_prev)` into `out` (length `suffstat_dim(k)`).
    fn suffstat(&self, k: usize, t: usize, y: &[f64], x_next: &[f64], x_prev: &[f64], out: &mut [f64]);

    /// The maximizer: parameters from an occupancy-weighted statistic pair.
    /// `prev` supplies the values of any component the model does not
    /// estimate.
    fn maximize(
        &self,
        k: usize,
        s3: &[f64],
        s2: f64,
        prev: &Self::Params,
        feasibility: &FeasibilityConfig,
    ) -> Result<Self::Params>;

    /// Flattened parameter columns for per-step records.
    fn param_columns(&self, theta: &Theta<Self::Params>) -> Vec<(String, f64)>;

    /// Precomputes whatever `x_prev` contributes to `f_k(. | x_prev)` into a
    /// state-sized anchor. Smoothers evaluate one ancestor against many
    /// descendants, so models with expensive drifts should override this
    /// together with the `*_anchored` methods. The default anchor is
    /// `x_prev` itself.
    fn transition_anchor(&self, _k: usize, _t: usize, x_prev: &[f64], _p: &Self::Params, out: &mut [f64]) {
        out.copy_from_slice(x_prev);
    }

    fn log_trans_density_anchored(&self, k: usize, t: usize, x_next: &[f64], anchor: &[f64], p: &Self::Params) -> f64 {
        self.log_trans_density(k, t, x_next, anchor, p)
    }

    fn suffstat_anchored(&self, k: usize, t: usize, y: &[f64], x_next: &[f64], anchor: &[f64], out: &mut [f64]) {
        self.suffstat(k, t, y, x_next, anchor, out);
    }

    /// False when `s_{k,t}` does not depend on `x_prev`.
    fn suffstat_uses_prev(&self, _k: usize) -> bool {
        true
    }

    /// `<psi_k(theta_k), s3> - A_k(theta_k) * count`, when the model exposes it.
    fn complete_data_score(&self, _k: usize, _p: &Self::Params, _s3: &[f64], _count: f64) -> Option<f64> {
        None
    }
}

/// `log g_k(y | x_next) + log f_k(x_next | x_prev)`.
pub fn log_joint<M: ModelSpec>(
    model: &M,
    k: usize,
    t: usize,
    y: &[f64],
    x_next: &[f64],
    x_prev: &[f64],
    p: &M::Params,
) -> f64 {
    model.log_meas_density(k, t, y, x_next, p) + model.log_trans_density(k, t, x_next, x_prev, p)
}

/// Offsets of the stacked statistic `[s1 (K*K, row-major); s2 (K); s3 mode 1 .. mode K]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatLayout {
    modes: usize,
    s3_offsets: Vec<usize>,
    dim: usize,
}

impl StatLayout {
    pub fn new(suffstat_dims: &[usize]) -> Self {
        let modes = suffstat_dims.len();
        let mut offset = modes * modes + modes;
        let mut s3_offsets = Vec::with_capacity(modes + 1);
        for d in suffstat_dims {
            s3_offsets.push(offset);
            offset += d;
        }
        s3_offsets.push(offset);
        Self { modes, s3_offsets, dim: offset }
    }

    pub fn for_model<M: ModelSpec + ?Sized>(model: &M) -> Self {
        let dims: Vec<usize> = (0..model.num_modes()).map(|k| model.suffstat_dim(k)).collect();
        Self::new(&dims)
    }

    pub fn num_modes(&self) -> usize {
        self.modes
    }

    /// Total stacked length `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn s1_index(&self, from: usize, to: usize) -> usize {
        from * self.modes + to
    }

    #[inline]
    pub fn s2_index(&self, k: usize) -> usize {
        self.modes * self.modes + k
    }

    pub fn s1_range(&self) -> Range<usize> {
        0..self.modes * self.modes
    }

    pub fn s2_range(&self) -> Range<usize> {
        self.modes * self.modes..self.modes * self.modes + self.modes
    }

    #[inline]
    pub fn s3_range(&self, k: usize) -> Range<usize> {
        self.s3_offsets[k]..self.s3_offsets[k + 1]
    }

    pub fn unstack(&self, flat: &[f64]) -> SuffStats {
        assert_eq!(flat.len(), self.dim, "stacked statistic length");
        SuffStats {
            s1: flat[self.s1_range()].to_vec(),
            s2: flat[self.s2_range()].to_vec(),
            s3: (0..self.modes).map(|k| flat[self.s3_range(k)].to_vec()).collect(),
        }
    }

    pub fn stack(&self, stats: &SuffStats) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dim);
        flat.extend_from_slice(&stats.s1);
        flat.extend_from_slice(&stats.s2);
        for block in &stats.s3 {
            flat.extend_from_slice(block);
        }
        assert_eq!(flat.len(), self.dim, "statistic does not match layout");
        flat
    }
}

/// Smoothed sufficient statistic: expected transition-pair mass `s1`
/// (row-major `K x K`), expected occupancy `s2`, and per-mode `s3` blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<Vec<f64>>,
}

impl SuffStats {
    pub fn zeros(layout: &StatLayout) -> Self {
        layout.unstack(&vec![0.0; layout.dim()])
    }

    pub fn num_modes(&self) -> usize {
        self.s2.len()
    }

    pub fn s1_row(&self, from: usize) -> &[f64] {
        let k = self.num_modes();
        &self.s1[from * k..(from + 1) * k]
    }
}

/// Moves a probability row onto `{p : p_i >= floor, sum p = 1}` by clamping
/// small entries to the floor and rescaling the rest.
pub(crate) fn project_row(row: &mut [f64], floor: f64) {
    let n = row.len();
    if floor <= 0.0 || floor * n as f64 >= 1.0 {
        let total: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= total;
        }
        return;
    }
    let mut pinned = vec![false; n];
    loop {
        let pinned_count = pinned.iter().filter(|&&b| b).count();
        let free_mass: f64 = row.iter().zip(&pinned).filter(|(_, &b)| !b).map(|(p, _)| *p).sum();
        let target = 1.0 - floor * pinned_count as f64;
        let scale = if free_mass > 0.0 { target / free_mass } else { 0.0 };
        let mut changed = false;
        for (p, pin) in row.iter_mut().zip(pinned.iter_mut()) {
            if *pin {
                *p = floor;
            } else if *p * scale < floor {
                *pin = true;
                changed = true;
            }
        }
        if !changed {
            for (p, pin) in row.iter_mut().zip(&pinned) {
                if !*pin {
                    *p *= scale;
                }
            }
            return;
        }
    }
}

/// M-step: row-normalized transition mass and per-mode maximizers, projected
/// onto the feasible set. Modes (or rows) with occupancy below
/// `occupancy_floor` keep their previous values.
pub fn mstep<M: ModelSpec>(
    stats: &SuffStats,
    prev: &Theta<M::Params>,
    feasibility: &FeasibilityConfig,
    model: &M,
) -> Result<Theta<M::Params>> {
    let k_modes = prev.num_modes();
    if stats.num_modes() != k_modes || stats.s1.len() != k_modes * k_modes || stats.s3.len() != k_modes {
        return Err(Error::Dimension(format!(
            "statistic has {} modes, parameter has {k_modes}",
            stats.num_modes()
        )));
    }

    let mut entries = Vec::with_capacity(k_modes * k_modes);
    for k in 0..k_modes {
        let row = stats.s1_row(k);
        let mass: f64 = row.iter().sum();
        let mut new_row: Vec<f64> = if mass < feasibility.occupancy_floor || !mass.is_finite() {
            prev.tpm.row(k).to_vec()
        } else {
            row.iter().map(|v| v.max(0.0) / mass).collect()
        };
        project_row(&mut new_row, feasibility.tpm_floor);
        entries.extend(new_row);
    }
    let tpm = TransitionMatrix::from_flat_unchecked(k_modes, entries);

    let mut modes = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let occupancy = stats.s2[k];
        if occupancy < feasibility.occupancy_floor || !occupancy.is_finite() {
            modes.push(prev.modes[k].clone());
        } else {
            modes.push(model.maximize(k, &stats.s3[k], occupancy, &prev.modes[k], feasibility)?);
        }
    }
    Ok(Theta { tpm, modes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_id_bounds() {
        assert!(ModeId::new(0, 2).is_err());
        assert!(ModeId::new(3, 2).is_err());
        let m = ModeId::new(2, 2).unwrap();
        assert_eq!(m.index(), 1);
        assert_eq!(ModeId::from_index(1), m);
    }

    #[test]
    fn transition_matrix_validation() {
        assert!(TransitionMatrix::new(vec![]).is_err());
        assert!(TransitionMatrix::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![-0.1, 1.1], vec![0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![1.0], vec![1.0]]).is_err());
        let m = TransitionMatrix::new(vec![vec![0.95, 0.05], vec![0.2, 0.8]]).unwrap();
        for k in 0..2 {
            assert!((m.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transition_matrix_json_shape() {
        let m = TransitionMatrix::new(vec![vec![0.6, 0.4], vec![0.85, 0.15]]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(text, "[[0.6,0.4],[0.85,0.15]]");
        let back: TransitionMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<TransitionMatrix>("[[0.6,0.6],[0.5,0.5]]").is_err());
    }

    #[test]
    fn layout_offsets() {
        let layout = StatLayout::new(&[2, 3]);
        assert_eq!(layout.dim(), 4 + 2 + 5);
        assert_eq!(layout.s1_index(0, 1), 1);
        assert_eq!(layout.s2_index(1), 5);
        assert_eq!(layout.s3_range(0), 6..8);
        assert_eq!(layout.s3_range(1), 8..11);
        let flat: Vec<f64> = (0..11).map(f64::from).collect();
        let stats = layout.unstack(&flat);
        assert_eq!(stats.s1, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(stats.s3[1], vec![8.0, 9.0, 10.0]);
        assert_eq!(layout.stack(&stats), flat);
    }

    #[test]
    fn project_row_keeps_floor_and_sum() {
        let mut row = vec![1e-12, 0.5, 0.5 - 1e-12];
        project_row(&mut row, 1e-6);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 1e-6));
        let mut row = vec![0.0, 0.0, 1.0];
        project_row(&mut row, 0.1);
        assert!((row[0] - 0.1).abs() < 1e-15 && (row[2] - 0.8).abs() < 1e-15);
        let mut row = vec![0.3, 0.7];
        project_row(&mut row, 1e-6);
        assert_eq!(row, vec![0.3, 0.7]);
    }
}
