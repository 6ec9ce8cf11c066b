//! Ready-made experiment set-ups: a switching-noise nonlinear benchmark, a
//! jump Markov linear system with measurement failures, a range-based
//! positioning model with LOS/NLOS switching, and user-defined linear
//! models loaded from JSON.

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, InitialMode, InitialState, Smoother, StepSchedule};
use crate::error::{Error, Result};
use crate::gaussian::{tpm_columns, Dynamics, GaussianModeParams, GaussianModel, LinearDynamics, NoiseChannels};
use crate::model::{FeasibilityConfig, ModeId, ModelSpec, Theta, TransitionMatrix};
use crate::numerics::LN_2PI;

/// A model together with truth, starting guess and run defaults.
#[derive(Clone, Debug)]
pub struct Scenario<M: ModelSpec> {
    pub model: M,
    pub truth: Theta<M::Params>,
    pub init: Theta<M::Params>,
    /// Prior of `x_0`, used by both the simulator and the filter.
    pub initial_state: InitialState,
    /// Distribution of `r_0` when simulating.
    pub true_initial_mode: InitialMode,
    /// Mode prior handed to the filter.
    pub initial_mode: InitialMode,
    pub em: EmConfig,
    pub particles: usize,
    pub steps: usize,
    /// Label written for each zero-based mode in trajectory files.
    pub mode_labels: Vec<i64>,
}

/// `x_t = x/2 + 25x/(1+x^2) + 8 cos(1.2 t) + v`, `y_t = x_t^2/20 + e^(r_t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BenchmarkDynamics;

impl BenchmarkDynamics {
    pub fn drift_value(t: usize, x: f64) -> f64 {
        0.5 * x + 25.0 * x / (1.0 + x * x) + 8.0 * (1.2 * t as f64).cos()
    }
}

impl Dynamics for BenchmarkDynamics {
    fn num_modes(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn meas_dim(&self) -> usize {
        1
    }

    fn drift(&self, _k: usize, t: usize, x_prev: &[f64], out: &mut [f64]) {
        out[0] = Self::drift_value(t, x_prev[0]);
    }

    fn observe(&self, _k: usize, _t: usize, x: &[f64], out: &mut [f64]) {
        out[0] = x[0] * x[0] / 20.0;
    }
}

fn two_mode_tpm(p11: f64, p22: f64) -> TransitionMatrix {
    TransitionMatrix::new(vec![vec![p11, 1.0 - p11], vec![1.0 - p22, p22]]).expect("valid two-state matrix")
}

/// Switching measurement-noise benchmark with known unit process noise.
/// The six scalars `mu_e_k`, `Sigma_e_k`, `pi_11`, `pi_22` are estimated.
pub fn benchmark_model() -> Scenario<GaussianModel<BenchmarkDynamics>> {
    let mode = |mu_e: f64, var_e: f64| GaussianModeParams::scalar(0.0, 1.0, mu_e, var_e).expect("positive variances");
    let truth = Theta::new(vec![mode(0.0, 1.0), mode(3.0, 4.0)], two_mode_tpm(0.95, 0.8)).expect("two modes");
    let init = Theta::new(vec![mode(0.5, 2.0), mode(2.0, 2.0)], two_mode_tpm(0.7, 0.7)).expect("two modes");
    Scenario {
        model: GaussianModel::new(BenchmarkDynamics, NoiseChannels::MEASUREMENT),
        truth,
        init,
        initial_state: InitialState::Known(vec![0.0]),
        true_initial_mode: InitialMode::Known(ModeId::from_index(0)),
        initial_mode: InitialMode::Known(ModeId::from_index(0)),
        em: EmConfig {
            schedule: StepSchedule::new(0.7).expect("valid exponent"),
            smoother: Smoother::ForwardSmoothing,
            ..EmConfig::default()
        },
        particles: 150,
        steps: 10_000,
        mode_labels: vec![1, 2],
    }
}

/// `x_{t+1} = x_t + v`, `y_t = r_t x_t + (100 - 90 r_t) e` with `r in {0, 1}`.
/// Label `r = 0` (failure) is mode 1 and `r = 1` is mode 2.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FailureDynamics;

impl Dynamics for FailureDynamics {
    fn num_modes(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn meas_dim(&self) -> usize {
        1
    }

    fn drift(&self, _k: usize, _t: usize, x_prev: &[f64], out: &mut [f64]) {
        out[0] = x_prev[0];
    }

    fn observe(&self, k: usize, _t: usize, x: &[f64], out: &mut [f64]) {
        out[0] = k as f64 * x[0];
    }
}

/// Measurement-failure system where only the transition matrix is unknown.
pub fn jmls_failure_model() -> Scenario<GaussianModel<FailureDynamics>> {
    let failure = GaussianModeParams::scalar(0.0, 4.0, 0.0, 100.0 * 100.0).expect("positive variances");
    let working = GaussianModeParams::scalar(0.0, 4.0, 0.0, 10.0 * 10.0).expect("positive variances");
    let modes = vec![failure, working];
    let truth = Theta::new(
        modes.clone(),
        TransitionMatrix::new(vec![vec![0.6, 0.4], vec![0.85, 0.15]]).expect("valid matrix"),
    )
    .expect("two modes");
    let init = Theta::new(modes, two_mode_tpm(0.5, 0.5)).expect("two modes");
    Scenario {
        model: GaussianModel::new(FailureDynamics, NoiseChannels::NONE),
        truth,
        init,
        initial_state: InitialState::isotropic(vec![0.0], 400.0),
        true_initial_mode: InitialMode::Distribution(vec![0.68, 0.32]),
        initial_mode: InitialMode::Uniform,
        em: EmConfig {
            schedule: StepSchedule::new(0.95).expect("valid exponent"),
            smoother: Smoother::PathBased,
            ..EmConfig::default()
        },
        particles: 500,
        steps: 20_000,
        mode_labels: vec![0, 1],
    }
}

/// Scalar Gaussian noise `N(mean, var)` on one range measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeNoise {
    pub mean: f64,
    pub var: f64,
}

impl RangeNoise {
    fn log_density(&self, e: f64) -> f64 {
        let r = e - self.mean;
        -0.5 * (LN_2PI + self.var.ln() + r * r / self.var)
    }
}

/// Euclidean distance between a position and a station.
pub fn range(pos: [f64; 2], station: [f64; 2]) -> f64 {
    (pos[0] - station[0]).hypot(pos[1] - station[1])
}

/// Gradient of [`range`] with respect to the position; zero at the station.
pub fn range_gradient(pos: [f64; 2], station: [f64; 2]) -> [f64; 2] {
    let d = range(pos, station);
    if d == 0.0 {
        [0.0, 0.0]
    } else {
        [(pos[0] - station[0]) / d, (pos[1] - station[1]) / d]
    }
}

/// Nearly-constant-velocity motion with range measurements to several base
/// stations, one of which has mode-dependent (LOS/NLOS) noise.
///
/// State is `[p_x, v_x, p_y, v_y]`; process noise `v ~ N(0, sigma_v^2 I_2)`
/// enters through `Gamma`. Because `Gamma` has rank 2, the transition density
/// is evaluated for the least-squares noise `(Gamma^T Gamma)^-1 Gamma^T (x - F x_prev)`,
/// i.e. with respect to Lebesgue measure on the range of `Gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPositioningModel {
    pub dt: f64,
    pub sigma_v: f64,
    pub stations: Vec<[f64; 2]>,
    /// Index of the station with switching noise.
    pub switching: usize,
    /// Noise of each station; the entry at `switching` is ignored.
    pub known_noise: Vec<RangeNoise>,
    pub modes: usize,
}

impl CvPositioningModel {
    pub fn new(
        dt: f64,
        sigma_v: f64,
        stations: Vec<[f64; 2]>,
        switching: usize,
        known_noise: Vec<RangeNoise>,
        modes: usize,
    ) -> Result<Self> {
        if !(dt > 0.0) || !(sigma_v > 0.0) {
            return Err(Error::Domain("sampling time and process noise must be positive".into()));
        }
        if switching >= stations.len() || known_noise.len() != stations.len() || modes == 0 {
            return Err(Error::Dimension("inconsistent station configuration".into()));
        }
        if known_noise.iter().enumerate().any(|(i, n)| i != switching && !(n.var > 0.0)) {
            return Err(Error::Domain("known station noise variances must be positive".into()));
        }
        Ok(Self { dt, sigma_v, stations, switching, known_noise, modes })
    }

    /// `F` as a row-major 4x4 matrix.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let dt = self.dt;
        DMatrix::from_row_slice(4, 4, &[1.0, dt, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, dt, 0.0, 0.0, 0.0, 1.0])
    }

    /// `Gamma` as a 4x2 matrix.
    pub fn noise_gain(&self) -> DMatrix<f64> {
        let dt = self.dt;
        let h = dt * dt / 2.0;
        DMatrix::from_row_slice(4, 2, &[h, 0.0, dt, 0.0, 0.0, h, 0.0, dt])
    }

    fn predict(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0] + self.dt * x[1];
        out[1] = x[1];
        out[2] = x[2] + self.dt * x[3];
        out[3] = x[3];
    }

    /// Least-squares process noise explaining `x_next - anchor`.
    fn noise_estimate(&self, x_next: &[f64], anchor: &[f64]) -> [f64; 2] {
        let dt = self.dt;
        let h = dt * dt / 2.0;
        let norm = h * h + dt * dt;
        let d: Vec<f64> = x_next.iter().zip(anchor).map(|(a, b)| a - b).collect();
        [(h * d[0] + dt * d[1]) / norm, (h * d[2] + dt * d[3]) / norm]
    }

    fn switching_residual(&self, y: &[f64], x: &[f64]) -> f64 {
        y[self.switching] - range([x[0], x[2]], self.stations[self.switching])
    }
}

impl ModelSpec for CvPositioningModel {
    type Params = RangeNoise;

    fn num_modes(&self) -> usize {
        self.modes
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn meas_dim(&self) -> usize {
        self.stations.len()
    }

    fn log_trans_density(&self, k: usize, t: usize, x_next: &[f64], x_prev: &[f64], p: &Self::Params) -> f64 {
        let mut anchor = [0.0; 4];
        self.predict(x_prev, &mut anchor);
        self.log_trans_density_anchored(k, t, x_next, &anchor, p)
    }

    fn log_meas_density(&self, _k: usize, _t: usize, y: &[f64], x: &[f64], p: &Self::Params) -> f64 {
        let pos = [x[0], x[2]];
        self.stations
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let noise = if i == self.switching { p } else { &self.known_noise[i] };
                noise.log_density(y[i] - range(pos, *s))
            })
            .sum()
    }

    fn sample_transition(&self, _k: usize, _t: usize, x_prev: &[f64], _p: &Self::Params, rng: &mut dyn RngCore, out: &mut [f64]) {
        let vx: f64 = StandardNormal.sample(rng);
        let vy: f64 = StandardNormal.sample(rng);
        let (vx, vy) = (self.sigma_v * vx, self.sigma_v * vy);
        let h = self.dt * self.dt / 2.0;
        self.predict(x_prev, out);
        out[0] += h * vx;
        out[1] += self.dt * vx;
        out[2] += h * vy;
        out[3] += self.dt * vy;
    }

    fn sample_measurement(&self, _k: usize, _t: usize, x: &[f64], p: &Self::Params, rng: &mut dyn RngCore, out: &mut [f64]) {
        let pos = [x[0], x[2]];
        for (i, s) in self.stations.iter().enumerate() {
            let noise = if i == self.switching { p } else { &self.known_noise[i] };
            let z: f64 = StandardNormal.sample(rng);
            out[i] = range(pos, *s) + noise.mean + noise.var.sqrt() * z;
        }
    }

    fn transition_anchor(&self, _k: usize, _t: usize, x_prev: &[f64], _p: &Self::Params, out: &mut [f64]) {
        self.predict(x_prev, out);
    }

    fn log_trans_density_anchored(&self, _k: usize, _t: usize, x_next: &[f64], anchor: &[f64], _p: &Self::Params) -> f64 {
        let v = self.noise_estimate(x_next, anchor);
        let var = self.sigma_v * self.sigma_v;
        -(LN_2PI + var.ln()) - 0.5 * (v[0] * v[0] + v[1] * v[1]) / var
    }

    fn suffstat_dim(&self, _k: usize) -> usize {
        2
    }

    fn suffstat(&self, _k: usize, _t: usize, y: &[f64], x_next: &[f64], _x_prev: &[f64], out: &mut [f64]) {
        let e = self.switching_residual(y, x_next);
        out[0] = e;
        out[1] = e * e;
    }

    fn suffstat_anchored(&self, k: usize, t: usize, y: &[f64], x_next: &[f64], anchor: &[f64], out: &mut [f64]) {
        self.suffstat(k, t, y, x_next, anchor, out);
    }

    fn suffstat_uses_prev(&self, _k: usize) -> bool {
        false
    }

    fn maximize(&self, _k: usize, s3: &[f64], s2: f64, _prev: &Self::Params, feasibility: &FeasibilityConfig) -> Result<Self::Params> {
        if !(s2 > 0.0) {
            return Err(Error::Domain(format!("occupancy mass must be positive, got {s2}")));
        }
        let mean = s3[0] / s2;
        Ok(RangeNoise { mean, var: feasibility.clamp_variance(s3[1] / s2 - mean * mean) })
    }

    fn param_columns(&self, theta: &Theta<Self::Params>) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> =
            theta.modes.iter().enumerate().map(|(k, p)| (format!("mu_e_{}", k + 1), p.mean)).collect();
        out.extend(theta.modes.iter().enumerate().map(|(k, p)| (format!("Sigma_e_{}", k + 1), p.var)));
        tpm_columns(theta, &mut out);
        out
    }

    fn complete_data_score(&self, _k: usize, p: &Self::Params, s3: &[f64], count: f64) -> Option<f64> {
        let m = p.mean;
        let quad = s3[1] - 2.0 * m * s3[0] + m * m * count;
        Some(-0.5 * (count * (LN_2PI + p.var.ln()) + quad / p.var))
    }
}

/// Base stations on a 1 km equilateral triangle.
pub const DEFAULT_STATIONS: [[f64; 2]; 3] = [[0.0, 0.0], [1000.0, 0.0], [500.0, 866.025_403_784_438_6]];

/// Positioning scenario with two-mode noise on station 3 and known noise on
/// stations 1 and 2.
pub fn cv_positioning_model() -> Scenario<CvPositioningModel> {
    let known = RangeNoise { mean: 0.0, var: 25.0 };
    let model = CvPositioningModel::new(0.53, 1.0, DEFAULT_STATIONS.to_vec(), 2, vec![known; 3], 2)
        .expect("valid default geometry");
    let truth = Theta::new(
        vec![RangeNoise { mean: 0.0, var: 16.0 }, RangeNoise { mean: 30.0, var: 64.0 }],
        two_mode_tpm(0.95, 0.9),
    )
    .expect("two modes");
    let init = Theta::new(
        vec![RangeNoise { mean: 5.0, var: 50.0 }, RangeNoise { mean: 15.0, var: 90.0 }],
        two_mode_tpm(0.8, 0.8),
    )
    .expect("two modes");
    Scenario {
        model,
        truth,
        init,
        initial_state: InitialState::Known(vec![300.0, 2.0, 250.0, 1.0]),
        true_initial_mode: InitialMode::Known(ModeId::from_index(0)),
        initial_mode: InitialMode::Known(ModeId::from_index(0)),
        em: EmConfig {
            schedule: StepSchedule::new(0.7).expect("valid exponent"),
            smoother: Smoother::PathBased,
            feasibility: FeasibilityConfig { var_cap: Some(100.0), ..FeasibilityConfig::default() },
            ..EmConfig::default()
        },
        particles: 500,
        steps: 2_000,
        mode_labels: vec![1, 2],
    }
}

/// Single-mode variant of a positioning model: one Gaussian for the
/// switching station, used as the non-switching reference.
pub fn single_mode_positioning(model: &CvPositioningModel, noise: RangeNoise) -> (CvPositioningModel, Theta<RangeNoise>) {
    let single = CvPositioningModel { modes: 1, ..model.clone() };
    let theta = Theta::new(vec![noise], TransitionMatrix::identity(1)).expect("one mode");
    (single, theta)
}

/// JSON description of a jump Markov linear Gaussian system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CustomModelFile {
    pub dynamics: LinearDynamics,
    pub channels: NoiseChannels,
    pub truth: Theta<GaussianModeParams>,
    pub init: Theta<GaussianModeParams>,
    pub initial_state: InitialState,
    #[serde(default = "default_initial_mode")]
    pub initial_mode: InitialMode,
    #[serde(default)]
    pub em: Option<EmConfig>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_initial_mode() -> InitialMode {
    InitialMode::Known(ModeId::from_index(0))
}

fn default_particles() -> usize {
    150
}

fn default_steps() -> usize {
    1000
}

impl CustomModelFile {
    pub fn into_scenario(self) -> Result<Scenario<GaussianModel<LinearDynamics>>> {
        let k = self.dynamics.num_modes();
        if self.truth.num_modes() != k || self.init.num_modes() != k {
            return Err(Error::Dimension(format!("model file declares {k} modes but parameters disagree")));
        }
        for p in self.truth.modes.iter().chain(&self.init.modes) {
            if p.process.dim() != self.dynamics.state_dim() || p.measurement.dim() != self.dynamics.meas_dim() {
                return Err(Error::Dimension("noise dimensions do not match the linear maps".into()));
            }
        }
        Ok(Scenario {
            model: GaussianModel::new(self.dynamics, self.channels),
            truth: self.truth,
            init: self.init,
            initial_state: self.initial_state,
            true_initial_mode: self.initial_mode.clone(),
            initial_mode: self.initial_mode,
            em: self.em.unwrap_or_default(),
            particles: self.particles,
            steps: self.steps,
            mode_labels: (1..=k as i64).collect(),
        })
    }
}

/// Stationary distribution of a two-state chain.
pub fn two_state_stationary(tpm: &TransitionMatrix) -> [f64; 2] {
    let a = tpm.get(0, 1);
    let b = tpm.get(1, 0);
    [b / (a + b), a / (a + b)]
}
