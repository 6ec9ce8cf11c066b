//! Jump Markov Gaussian systems: `x_t = f_k(x_{t-1}) + v`, `y_t = h_k(x_t) + e`
//! with mode-dependent Gaussian noise, their sufficient statistics, and the
//! closed-form maximizer.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::model::{FeasibilityConfig, ModelSpec, Theta};
use crate::numerics::LN_2PI;

pub(crate) type Buf = SmallVec<[f64; 8]>;

/// Gaussian noise channel with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianChannel {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    /// Row-major lower Cholesky factor.
    chol: Vec<f64>,
    log_det: f64,
}

impl PartialEq for GaussianChannel {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl GaussianChannel {
    /// Symmetrizes `cov` and requires it to be positive definite.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}, mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite Gaussian parameter".into()));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let factor = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
        let l = factor.l();
        let mut chol = Vec::with_capacity(d * d);
        let mut log_det = 0.0;
        for i in 0..d {
            log_det += 2.0 * l[(i, i)].ln();
            for j in 0..d {
                chol.push(l[(i, j)]);
            }
        }
        Ok(Self { mean, cov, chol, log_det })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean], DMatrix::from_element(1, 1, var))
    }

    /// Builds the channel after clamping covariance eigenvalues into the
    /// feasible range.
    pub fn projected(mean: Vec<f64>, cov: DMatrix<f64>, feasibility: &FeasibilityConfig) -> Result<Self> {
        Self::new(mean, project_covariance(cov, feasibility))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Log-density of `residual` (a draw of the noise itself).
    pub fn log_density(&self, residual: &[f64]) -> f64 {
        let d = self.mean.len();
        if d == 1 {
            let u = (residual[0] - self.mean[0]) / self.chol[0];
            return -0.5 * (u * u + self.log_det + LN_2PI);
        }
        let mut u: Buf = SmallVec::with_capacity(d);
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = residual[i] - self.mean[i];
            for j in 0..i {
                acc -= self.chol[i * d + j] * u[j];
            }
            let ui = acc / self.chol[i * d + i];
            quad += ui * ui;
            u.push(ui);
        }
        -0.5 * (quad + self.log_det + d as f64 * LN_2PI)
    }

    /// Writes `mean + L z`, `z` standard normal, into `out`.
    pub fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let d = self.mean.len();
        let z: Buf = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..d {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.chol[i * d + j] * z[j];
            }
            out[i] = acc;
        }
    }

    fn smallest_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }

    /// Weighted Gaussian log-likelihood expressed through first and second
    /// moment sums: `sum_i w_i log N(r_i; mu, Sigma)` with `first = sum w r`,
    /// `second = sum w r r^T` (row-major) and `count = sum w`.
    pub fn moment_log_likelihood(&self, first: &[f64], second: &[f64], count: f64) -> f64 {
        let d = self.dim();
        let prec = self.cov.clone().try_inverse().expect("positive definite covariance");
        let mut trace = 0.0;
        for i in 0..d {
            for j in 0..d {
                trace += prec[(i, j)] * second[j * d + i];
            }
        }
        let mut cross = 0.0;
        let mut mahal = 0.0;
        for i in 0..d {
            for j in 0..d {
                cross += self.mean[i] * prec[(i, j)] * first[j];
                mahal += self.mean[i] * prec[(i, j)] * self.mean[j];
            }
        }
        -0.5 * (trace - 2.0 * cross + count * mahal) - 0.5 * count * (self.log_det + d as f64 * LN_2PI)
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension(format!("{name}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Symmetrizes and clamps eigenvalues into `[var_floor, var_cap]`.
pub fn project_covariance(cov: DMatrix<f64>, feasibility: &FeasibilityConfig) -> DMatrix<f64> {
    let cov = (&cov + cov.transpose()) * 0.5;
    if cov.nrows() == 1 {
        return DMatrix::from_element(1, 1, feasibility.clamp_variance(cov[(0, 0)]));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let needs_clamp = eig
        .eigenvalues
        .iter()
        .any(|&v| feasibility.clamp_variance(v) != v || !v.is_finite());
    if !needs_clamp {
        return cov;
    }
    let clamped = eig.eigenvalues.map(|v| feasibility.clamp_variance(if v.is_finite() { v } else { 0.0 }));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

/// Per-mode parameters `{mu_v, Sigma_v, mu_e, Sigma_e}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModeParams", into = "RawModeParams")]
pub struct GaussianModeParams {
    pub process: GaussianChannel,
    pub measurement: GaussianChannel,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct RawModeParams {
    mu_v: Vec<f64>,
    Sigma_v: Vec<Vec<f64>>,
    mu_e: Vec<f64>,
    Sigma_e: Vec<Vec<f64>>,
}

impl TryFrom<RawModeParams> for GaussianModeParams {
    type Error = Error;

    fn try_from(raw: RawModeParams) -> Result<Self> {
        Ok(Self {
            process: GaussianChannel::new(raw.mu_v, matrix_from_rows(&raw.Sigma_v, "Sigma_v")?)?,
            measurement: GaussianChannel::new(raw.mu_e, matrix_from_rows(&raw.Sigma_e, "Sigma_e")?)?,
        })
    }
}

impl From<GaussianModeParams> for RawModeParams {
    fn from(p: GaussianModeParams) -> Self {
        Self {
            mu_v: p.process.mean.clone(),
            Sigma_v: matrix_to_rows(&p.process.cov),
            mu_e: p.measurement.mean.clone(),
            Sigma_e: matrix_to_rows(&p.measurement.cov),
        }
    }
}

impl GaussianModeParams {
    pub fn new(process: GaussianChannel, measurement: GaussianChannel) -> Self {
        Self { process, measurement }
    }

    /// Scalar-state, scalar-measurement parameters.
    pub fn scalar(mu_v: f64, var_v: f64, mu_e: f64, var_e: f64) -> Result<Self> {
        Ok(Self {
            process: GaussianChannel::scalar(mu_v, var_v)?,
            measurement: GaussianChannel::scalar(mu_e, var_e)?,
        })
    }

    /// True when both covariances have eigenvalues inside the feasible range.
    pub fn is_feasible(&self, feasibility: &FeasibilityConfig, tol: f64) -> bool {
        [&self.process, &self.measurement].iter().all(|c| {
            let eig = SymmetricEigen::new(c.cov.clone()).eigenvalues;
            eig.iter().all(|&v| {
                v >= feasibility.var_floor * (1.0 - tol) && feasibility.var_cap.is_none_or(|cap| v <= cap * (1.0 + tol))
            })
        }) && self.process.smallest_eigenvalue() > 0.0
    }
}

/// Appends `[r; vec(r r^T)]` (row-major outer product).
fn write_moment_block(residual: &[f64], out: &mut [f64]) {
    let d = residual.len();
    out[..d].copy_from_slice(residual);
    for i in 0..d {
        for j in 0..d {
            out[d + i * d + j] = residual[i] * residual[j];
        }
    }
}

/// Full stacked Gaussian statistic
/// `[x - f(x_prev); vec((x - f)(x - f)^T); y - h(x); vec((y - h)(y - h)^T)]`.
pub fn gaussian_suffstat(
    y: &[f64],
    x_next: &[f64],
    x_prev: &[f64],
    drift: impl Fn(&[f64], &mut [f64]),
    meas: impl Fn(&[f64], &mut [f64]),
) -> Vec<f64> {
    let dx = x_next.len();
    let dy = y.len();
    let mut pred = vec![0.0; dx];
    drift(x_prev, &mut pred);
    let v: Vec<f64> = x_next.iter().zip(&pred).map(|(a, b)| a - b).collect();
    let mut obs = vec![0.0; dy];
    meas(x_next, &mut obs);
    let e: Vec<f64> = y.iter().zip(&obs).map(|(a, b)| a - b).collect();
    let mut out = vec![0.0; dx + dx * dx + dy + dy * dy];
    write_moment_block(&v, &mut out[..dx + dx * dx]);
    write_moment_block(&e, &mut out[dx + dx * dx..]);
    out
}

/// Mean and covariance from occupancy-weighted moment sums, projected onto
/// the feasible covariance set.
pub fn moment_estimate(
    first: &[f64],
    second: &[f64],
    count: f64,
    feasibility: &FeasibilityConfig,
) -> Result<GaussianChannel> {
    if !(count > 0.0) {
        return Err(Error::Domain(format!("occupancy mass must be positive, got {count}")));
    }
    let d = first.len();
    if second.len() != d * d {
        return Err(Error::Dimension(format!("second moment has {} entries, expected {}", second.len(), d * d)));
    }
    let mean: Vec<f64> = first.iter().map(|v| v / count).collect();
    let cov = DMatrix::from_fn(d, d, |i, j| second[i * d + j] / count - mean[i] * mean[j]);
    GaussianChannel::projected(mean, cov, feasibility)
}

/// Closed-form maximizer for a fully estimated Gaussian mode. `s3` has the
/// layout produced by [`gaussian_suffstat`].
pub fn gaussian_maximizer(
    s3: &[f64],
    s2: f64,
    state_dim: usize,
    meas_dim: usize,
    feasibility: &FeasibilityConfig,
) -> Result<GaussianModeParams> {
    let pv = state_dim + state_dim * state_dim;
    let pe = meas_dim + meas_dim * meas_dim;
    if s3.len() != pv + pe {
        return Err(Error::Dimension(format!("statistic has {} entries, expected {}", s3.len(), pv + pe)));
    }
    let process = moment_estimate(&s3[..state_dim], &s3[state_dim..pv], s2, feasibility)?;
    let measurement = moment_estimate(&s3[pv..pv + meas_dim], &s3[pv + meas_dim..], s2, feasibility)?;
    Ok(GaussianModeParams { process, measurement })
}

/// Deterministic part of a jump Markov Gaussian system.
pub trait Dynamics: Send + Sync {
    fn num_modes(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    /// `f_k(x_prev)` for the state at time `t`.
    fn drift(&self, k: usize, t: usize, x_prev: &[f64], out: &mut [f64]);
    /// `h_k(x)`.
    fn observe(&self, k: usize, t: usize, x: &[f64], out: &mut [f64]);
}

/// Which noise channels are estimated by the M-step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseChannels {
    pub process: bool,
    pub measurement: bool,
}

impl NoiseChannels {
    pub const ALL: Self = Self { process: true, measurement: true };
    pub const MEASUREMENT: Self = Self { process: false, measurement: true };
    pub const NONE: Self = Self { process: false, measurement: false };
}

/// Jump Markov Gaussian system over arbitrary [`Dynamics`].
#[derive(Clone, Debug)]
pub struct GaussianModel<D> {
    pub dynamics: D,
    pub channels: NoiseChannels,
}

impl<D: Dynamics> GaussianModel<D> {
    pub fn new(dynamics: D, channels: NoiseChannels) -> Self {
        Self { dynamics, channels }
    }

    fn process_residual(&self, k: usize, t: usize, x_next: &[f64], x_prev: &[f64]) -> Buf {
        let dx = self.dynamics.state_dim();
        let mut pred: Buf = SmallVec::from_elem(0.0, dx);
        self.dynamics.drift(k, t, x_prev, &mut pred);
        for (p, x) in pred.iter_mut().zip(x_next) {
            *p = x - *p;
        }
        pred
    }

    fn meas_residual(&self, k: usize, t: usize, y: &[f64], x: &[f64]) -> Buf {
        let dy = self.dynamics.meas_dim();
        let mut pred: Buf = SmallVec::from_elem(0.0, dy);
        self.dynamics.observe(k, t, x, &mut pred);
        for (p, obs) in pred.iter_mut().zip(y) {
            *p = obs - *p;
        }
        pred
    }

    fn process_block(&self) -> usize {
        let dx = self.dynamics.state_dim();
        if self.channels.process { dx + dx * dx } else { 0 }
    }
}

fn channel_columns(prefix: &str, values: &[&GaussianChannel], out: &mut Vec<(String, f64)>) {
    let d = values.first().map_or(0, |c| c.dim());
    for (k, c) in values.iter().enumerate() {
        for i in 0..d {
            let name = if d == 1 { format!("mu_{prefix}_{}", k + 1) } else { format!("mu_{prefix}_{}_{}", k + 1, i + 1) };
            out.push((name, c.mean[i]));
        }
    }
    for (k, c) in values.iter().enumerate() {
        for i in 0..d {
            for j in i..d {
                let name = if d == 1 {
                    format!("Sigma_{prefix}_{}", k + 1)
                } else {
                    format!("Sigma_{prefix}_{}_{}_{}", k + 1, i + 1, j + 1)
                };
                out.push((name, c.cov[(i, j)]));
            }
        }
    }
}

/// `pi_k_l` columns for every transition entry.
pub fn tpm_columns<P>(theta: &Theta<P>, out: &mut Vec<(String, f64)>) {
    let k = theta.num_modes();
    for from in 0..k {
        for to in 0..k {
            out.push((format!("pi_{}_{}", from + 1, to + 1), theta.tpm.get(from, to)));
        }
    }
}

impl<D: Dynamics> ModelSpec for GaussianModel<D> {
    type Params = GaussianModeParams;

    fn num_modes(&self) -> usize {
        self.dynamics.num_modes()
    }

    fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn meas_dim(&self) -> usize {
        self.dynamics.meas_dim()
    }

    fn log_trans_density(&self, k: usize, t: usize, x_next: &[f64], x_prev: &[f64], p: &Self::Params) -> f64 {
        p.process.log_density(&self.process_residual(k, t, x_next, x_prev))
    }

    fn log_meas_density(&self, k: usize, t: usize, y: &[f64], x: &[f64], p: &Self::Params) -> f64 {
        p.measurement.log_density(&self.meas_residual(k, t, y, x))
    }

    fn sample_transition(
        &self,
        k: usize,
        t: usize,
        x_prev: &[f64],
        p: &Self::Params,
        rng: &mut dyn RngCore,
        out: &mut [f64],
    ) {
        let dx = self.dynamics.state_dim();
        let mut noise: Buf = SmallVec::from_elem(0.0, dx);
        p.process.sample(rng, &mut noise);
        self.dynamics.drift(k, t, x_prev, out);
        for (o, v) in out.iter_mut().zip(&noise) {
            *o += v;
        }
    }

    fn sample_measurement(&self, k: usize, t: usize, x: &[f64], p: &Self::Params, rng: &mut dyn RngCore, out: &mut [f64]) {
        let dy = self.dynamics.meas_dim();
        let mut noise: Buf = SmallVec::from_elem(0.0, dy);
        p.measurement.sample(rng, &mut noise);
        self.dynamics.observe(k, t, x, out);
        for (o, e) in out.iter_mut().zip(&noise) {
            *o += e;
        }
    }

    fn transition_anchor(&self, k: usize, t: usize, x_prev: &[f64], _p: &Self::Params, out: &mut [f64]) {
        self.dynamics.drift(k, t, x_prev, out);
    }

    fn log_trans_density_anchored(&self, _k: usize, _t: usize, x_next: &[f64], anchor: &[f64], p: &Self::Params) -> f64 {
        let r: Buf = x_next.iter().zip(anchor).map(|(x, a)| x - a).collect();
        p.process.log_density(&r)
    }

    fn suffstat_anchored(&self, k: usize, t: usize, y: &[f64], x_next: &[f64], anchor: &[f64], out: &mut [f64]) {
        let pv = self.process_block();
        if self.channels.process {
            let r: Buf = x_next.iter().zip(anchor).map(|(x, a)| x - a).collect();
            write_moment_block(&r, &mut out[..pv]);
        }
        if self.channels.measurement {
            write_moment_block(&self.meas_residual(k, t, y, x_next), &mut out[pv..]);
        }
    }

    fn suffstat_uses_prev(&self, _k: usize) -> bool {
        self.channels.process
    }

    fn suffstat_dim(&self, _k: usize) -> usize {
        let dy = self.dynamics.meas_dim();
        self.process_block() + if self.channels.measurement { dy + dy * dy } else { 0 }
    }

    fn suffstat(&self, k: usize, t: usize, y: &[f64], x_next: &[f64], x_prev: &[f64], out: &mut [f64]) {
        let pv = self.process_block();
        if self.channels.process {
            write_moment_block(&self.process_residual(k, t, x_next, x_prev), &mut out[..pv]);
        }
        if self.channels.measurement {
            write_moment_block(&self.meas_residual(k, t, y, x_next), &mut out[pv..]);
        }
    }

    fn maximize(
        &self,
        _k: usize,
        s3: &[f64],
        s2: f64,
        prev: &Self::Params,
        feasibility: &FeasibilityConfig,
    ) -> Result<Self::Params> {
        let dx = self.dynamics.state_dim();
        let dy = self.dynamics.meas_dim();
        let pv = self.process_block();
        let process = if self.channels.process {
            moment_estimate(&s3[..dx], &s3[dx..pv], s2, feasibility)?
        } else {
            prev.process.clone()
        };
        let measurement = if self.channels.measurement {
            moment_estimate(&s3[pv..pv + dy], &s3[pv + dy..], s2, feasibility)?
        } else {
            prev.measurement.clone()
        };
        Ok(GaussianModeParams { process, measurement })
    }

    fn param_columns(&self, theta: &Theta<Self::Params>) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if self.channels.process {
            let chans: Vec<&GaussianChannel> = theta.modes.iter().map(|m| &m.process).collect();
            channel_columns("v", &chans, &mut out);
        }
        if self.channels.measurement {
            let chans: Vec<&GaussianChannel> = theta.modes.iter().map(|m| &m.measurement).collect();
            channel_columns("e", &chans, &mut out);
        }
        tpm_columns(theta, &mut out);
        out
    }

    fn complete_data_score(&self, _k: usize, p: &Self::Params, s3: &[f64], count: f64) -> Option<f64> {
        let dx = self.dynamics.state_dim();
        let dy = self.dynamics.meas_dim();
        let pv = self.process_block();
        let mut score = 0.0;
        if self.channels.process {
            score += p.process.moment_log_likelihood(&s3[..dx], &s3[dx..pv], count);
        }
        if self.channels.measurement {
            score += p.measurement.moment_log_likelihood(&s3[pv..pv + dy], &s3[pv + dy..], count);
        }
        Some(score)
    }
}

/// Per-mode linear maps `x_t = A_k x_{t-1} + v`, `y_t = C_k x_t + e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RawLinearMode>", into = "Vec<RawLinearMode>")]
pub struct LinearDynamics {
    modes: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct RawLinearMode {
    A: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
}

impl LinearDynamics {
    pub fn new(modes: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        let Some((a0, c0)) = modes.first() else {
            return Err(Error::Config("linear model needs at least one mode".into()));
        };
        let dx = a0.nrows();
        let dy = c0.nrows();
        for (k, (a, c)) in modes.iter().enumerate() {
            if a.nrows() != dx || a.ncols() != dx || c.nrows() != dy || c.ncols() != dx {
                return Err(Error::Dimension(format!("mode {} has inconsistent A/C shapes", k + 1)));
            }
        }
        Ok(Self { modes })
    }
}

impl TryFrom<Vec<RawLinearMode>> for LinearDynamics {
    type Error = Error;

    fn try_from(raw: Vec<RawLinearMode>) -> Result<Self> {
        let modes = raw
            .iter()
            .map(|m| Ok((matrix_from_rows(&m.A, "A")?, matrix_from_rows(&m.C, "C")?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(modes)
    }
}

impl From<LinearDynamics> for Vec<RawLinearMode> {
    fn from(d: LinearDynamics) -> Self {
        d.modes.iter().map(|(a, c)| RawLinearMode { A: matrix_to_rows(a), C: matrix_to_rows(c) }).collect()
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

impl Dynamics for LinearDynamics {
    fn num_modes(&self) -> usize {
        self.modes.len()
    }

    fn state_dim(&self) -> usize {
        self.modes[0].0.nrows()
    }

    fn meas_dim(&self) -> usize {
        self.modes[0].1.nrows()
    }

    fn drift(&self, k: usize, _t: usize, x_prev: &[f64], out: &mut [f64]) {
        mat_vec(&self.modes[k].0, x_prev, out);
    }

    fn observe(&self, k: usize, _t: usize, x: &[f64], out: &mut [f64]) {
        mat_vec(&self.modes[k].1, x, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feas() -> FeasibilityConfig {
        FeasibilityConfig::default()
    }

    #[test]
    fn suffstat_scalar_example() {
        let s = gaussian_suffstat(&[1.0], &[3.0], &[2.0], |x, o| o[0] = 0.5 * x[0], |x, o| o[0] = x[0] * x[0] / 20.0);
        let expected = [2.0, 4.0, 0.55, 0.3025];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn suffstat_zero_residuals() {
        let x_prev = [1.5, -2.0];
        let x_next = [0.75, -1.0];
        let y = [0.75 + 1.0];
        let s = gaussian_suffstat(&y, &x_next, &x_prev, |x, o| {
            o[0] = 0.5 * x[0];
            o[1] = 0.5 * x[1];
        }, |x, o| o[0] = x[0] - x[1]);
        assert_eq!(s.len(), 2 + 4 + 1 + 1);
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn maximizer_hand_cases() {
        // Scalar measurement block: s2 = 2, <1> = 2, <2> = 4 -> mu 1, var 1.
        let p = gaussian_maximizer(&[0.0, 2.0, 2.0, 4.0], 2.0, 1, 1, &feas()).unwrap();
        assert!((p.measurement.mean()[0] - 1.0).abs() < 1e-15);
        assert!((p.measurement.cov()[(0, 0)] - 1.0).abs() < 1e-15);
        let ch = moment_estimate(&[8.0], &[20.0], 4.0, &feas()).unwrap();
        assert_eq!(ch.mean(), &[2.0]);
        assert!((ch.cov()[(0, 0)] - 1.0).abs() < 1e-15);
        // Centered unit case in two dimensions.
        let s2 = 3.0;
        let ch = moment_estimate(&[0.0, 0.0], &[s2, 0.0, 0.0, s2], s2, &feas()).unwrap();
        assert_eq!(ch.mean(), &[0.0, 0.0]);
        assert_eq!(ch.cov(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn maximizer_rejects_empty_mode() {
        assert!(matches!(moment_estimate(&[1.0], &[1.0], 0.0, &feas()), Err(Error::Domain(_))));
        assert!(gaussian_maximizer(&[0.0; 4], -1.0, 1, 1, &feas()).is_err());
    }

    #[test]
    fn covariance_is_floored_and_capped() {
        let ch = moment_estimate(&[1.0], &[1.0], 1.0, &feas()).unwrap();
        assert_eq!(ch.cov()[(0, 0)], 1e-6);
        let capped = FeasibilityConfig { var_cap: Some(100.0), ..feas() };
        let ch = moment_estimate(&[0.0], &[500.0], 1.0, &capped).unwrap();
        assert_eq!(ch.cov()[(0, 0)], 100.0);
        // Indefinite 2x2 (eigenvalues 3, -1) gets its negative eigenvalue lifted.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_covariance(cov, &feas());
        let eig = SymmetricEigen::new(p).eigenvalues;
        assert!((eig.min() - 1e-6).abs() < 1e-12);
        assert!((eig.max() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_closed_form() {
        let ch = GaussianChannel::scalar(0.0, 1.0).unwrap();
        assert!((ch.log_density(&[0.0]) + 0.5 * LN_2PI).abs() < 1e-15);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ch = GaussianChannel::new(vec![1.0, -1.0], cov.clone()).unwrap();
        let r = [0.3, 0.2];
        let z = nalgebra::DVector::from_vec(vec![r[0] - 1.0, r[1] + 1.0]);
        let q = (z.transpose() * cov.clone().try_inverse().unwrap() * &z)[(0, 0)];
        let expected = -0.5 * (q + cov.determinant().ln() + 2.0 * LN_2PI);
        assert!((ch.log_density(&r) - expected).abs() < 1e-12);
    }

    #[test]
    fn non_pd_covariance_rejected() {
        assert!(GaussianChannel::scalar(0.0, 0.0).is_err());
        assert!(GaussianChannel::new(vec![0.0], DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mode_params_json_round_trip() {
        let p = GaussianModeParams::scalar(0.0, 1.0, 3.0, 4.0).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"mu_v":[0.0],"Sigma_v":[[1.0]],"mu_e":[3.0],"Sigma_e":[[4.0]]}"#);
        let back: GaussianModeParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    fn brute_force_moments(w: &[f64], r: &[[f64; 2]]) -> (Vec<f64>, DMatrix<f64>) {
        let total: f64 = w.iter().sum();
        let mut mean = vec![0.0; 2];
        for (wi, ri) in w.iter().zip(r) {
            for a in 0..2 {
                mean[a] += wi * ri[a] / total;
            }
        }
        let mut cov = DMatrix::zeros(2, 2);
        for (wi, ri) in w.iter().zip(r) {
            for a in 0..2 {
                for b in 0..2 {
                    cov[(a, b)] += wi * ri[a] * ri[b] / total;
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                cov[(a, b)] -= mean[a] * mean[b];
            }
        }
        (mean, cov)
    }

    proptest! {
        #[test]
        fn maximizer_is_scale_consistent(first in -5.0..5.0f64, extra in 0.1..10.0f64, count in 0.1..10.0f64, c in 0.01..100.0f64) {
            let second = first * first / count + extra;
            let a = moment_estimate(&[first], &[second], count, &feas()).unwrap();
            let b = moment_estimate(&[c * first], &[c * second], c * count, &feas()).unwrap();
            prop_assert!((a.mean()[0] - b.mean()[0]).abs() < 1e-12 * (1.0 + a.mean()[0].abs()));
            prop_assert!((a.cov()[(0, 0)] - b.cov()[(0, 0)]).abs() < 1e-12 * (1.0 + a.cov()[(0, 0)]));
        }

        #[test]
        fn maximizer_matches_weighted_sample_moments(
            data in proptest::collection::vec((0.01..1.0f64, -3.0..3.0f64, -3.0..3.0f64), 5..30)
        ) {
            let w: Vec<f64> = data.iter().map(|d| d.0).collect();
            let r: Vec<[f64; 2]> = data.iter().map(|d| [d.1, d.2]).collect();
            let mut first = [0.0; 2];
            let mut second = [0.0; 4];
            for (wi, ri) in w.iter().zip(&r) {
                for a in 0..2 {
                    first[a] += wi * ri[a];
                    for b in 0..2 {
                        second[a * 2 + b] += wi * ri[a] * ri[b];
                    }
                }
            }
            let (mean, cov) = brute_force_moments(&w, &r);
            let tiny = FeasibilityConfig { var_floor: 1e-300, ..feas() };
            let est = moment_estimate(&first, &second, w.iter().sum(), &tiny);
            if let Ok(est) = est {
                for a in 0..2 {
                    prop_assert!((est.mean()[a] - mean[a]).abs() < 1e-12);
                    for b in 0..2 {
                        prop_assert!((est.cov()[(a, b)] - cov[(a, b)]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
