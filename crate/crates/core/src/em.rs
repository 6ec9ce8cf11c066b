//! Online EM: one filter step, one smoothing update, one M-step per
//! observation.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baseline::{aggregate_joint, estimate_joint, pf_fs_update, pf_path_update, pf_step, JointSystem};
use crate::error::{Error, Result};
use crate::gaussian::GaussianChannel;
use crate::model::{mstep, FeasibilityConfig, ModeId, ModelSpec, StatLayout, SuffStats, Theta};
use crate::rbpf::{estimate, rbpf_step, sample_index, BootstrapProposal, Estimate, ParticleSystem, Proposal};
use crate::rng::{substream, INIT_SLOT};
use crate::smoothing::{aggregate, fs_update, path_update, SmoothingReport};

/// Step sizes `gamma_t = t^(-exponent)`, exponent in `(0.5, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StepSchedule {
    exponent: f64,
}

impl StepSchedule {
    pub fn new(exponent: f64) -> Result<Self> {
        if !(exponent > 0.5 && exponent <= 1.0) {
            return Err(Error::Config(format!("step-size exponent {exponent} outside (0.5, 1]")));
        }
        Ok(Self { exponent })
    }

    /// `gamma_t = 1 / t`: plain running averages.
    pub fn harmonic() -> Self {
        Self { exponent: 1.0 }
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn gamma(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            (t as f64).powf(-self.exponent)
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { exponent: 0.7 }
    }
}

impl TryFrom<f64> for StepSchedule {
    type Error = Error;

    fn try_from(a: f64) -> Result<Self> {
        Self::new(a)
    }
}

impl From<StepSchedule> for f64 {
    fn from(s: StepSchedule) -> f64 {
        s.exponent
    }
}

/// Backward-kernel approximation used for the intermediate statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoother {
    /// All previous particles are candidate ancestors, `O(N^2)`.
    ForwardSmoothing,
    /// Only the actual ancestor, `O(N)`.
    PathBased,
}

/// Whether the mode is marginalized or sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    RaoBlackwellized,
    Joint,
}

/// The four filter/smoother combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    PfPath,
    PfFs,
    RbpfPath,
    RbpfFs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::PfPath, Algorithm::RbpfPath, Algorithm::PfFs, Algorithm::RbpfFs];

    pub fn smoother(self) -> Smoother {
        match self {
            Algorithm::PfPath | Algorithm::RbpfPath => Smoother::PathBased,
            Algorithm::PfFs | Algorithm::RbpfFs => Smoother::ForwardSmoothing,
        }
    }

    pub fn filter_kind(self) -> FilterKind {
        match self {
            Algorithm::PfPath | Algorithm::PfFs => FilterKind::Joint,
            Algorithm::RbpfPath | Algorithm::RbpfFs => FilterKind::RaoBlackwellized,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PfPath => "pf_path",
            Algorithm::PfFs => "pf_fs",
            Algorithm::RbpfPath => "rbpf_path",
            Algorithm::RbpfFs => "rbpf_fs",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?} (expected pf_path, pf_fs, rbpf_path or rbpf_fs)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub schedule: StepSchedule,
    /// First step at which the M-step runs; statistics accumulate before it.
    pub burn_in: usize,
    /// M-step every `update_period` steps.
    pub update_period: usize,
    pub feasibility: FeasibilityConfig,
    pub smoother: Smoother,
    /// Resample when `ESS < threshold * N`; `1.0` resamples every step.
    pub resample_threshold: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::default(),
            burn_in: 20,
            update_period: 1,
            feasibility: FeasibilityConfig::default(),
            smoother: Smoother::PathBased,
            resample_threshold: 0.5,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in < 1 {
            return Err(Error::Config("burn_in must be at least 1".into()));
        }
        if self.update_period < 1 {
            return Err(Error::Config("update_period must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config(format!("resample_threshold {} outside [0, 1]", self.resample_threshold)));
        }
        Ok(())
    }
}

/// Distribution of the mode `r_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMode {
    Known(ModeId),
    Uniform,
    Distribution(Vec<f64>),
}

impl InitialMode {
    pub fn probabilities(&self, num_modes: usize) -> Result<Vec<f64>> {
        match self {
            InitialMode::Known(m) => {
                let m = ModeId::new(m.get(), num_modes)?;
                let mut p = vec![0.0; num_modes];
                p[m.index()] = 1.0;
                Ok(p)
            }
            InitialMode::Uniform => Ok(vec![1.0 / num_modes as f64; num_modes]),
            InitialMode::Distribution(p) => {
                if p.len() != num_modes {
                    return Err(Error::Dimension(format!("initial mode distribution has {} entries", p.len())));
                }
                crate::rbpf::check_simplex(p, "initial mode distribution")?;
                Ok(p.clone())
            }
        }
    }
}

/// Distribution of the continuous state `x_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Known(Vec<f64>),
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Known(x) => x.len(),
            InitialState::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// Draws `n` initial states from `(seed, 0, slot)` substreams.
    pub fn draw(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        match self {
            InitialState::Known(x) => Ok(vec![x.clone(); n]),
            InitialState::Gaussian { mean, cov } => {
                let cov = crate::gaussian::matrix_from_rows(cov, "initial covariance")?;
                let channel = GaussianChannel::new(mean.clone(), cov)?;
                Ok((0..n)
                    .map(|i| {
                        let mut rng = substream(seed, 0, INIT_SLOT - 1 - i as u64);
                        let mut x = vec![0.0; mean.len()];
                        channel.sample(&mut rng, &mut x);
                        x
                    })
                    .collect())
            }
        }
    }

    /// Convenience for an isotropic Gaussian prior.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let cov = DMatrix::<f64>::identity(d, d) * var;
        InitialState::Gaussian {
            mean,
            cov: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        }
    }
}

/// The particle system behind an estimator.
#[derive(Clone, Debug)]
pub enum FilterState {
    RaoBlackwellized(ParticleSystem),
    Joint(JointSystem),
}

/// Current parameter estimate, particle system and last smoothed statistic.
#[derive(Clone, Debug)]
pub struct EstimatorState<P> {
    pub theta: Theta<P>,
    pub filter: FilterState,
    pub t: usize,
    pub stats: SuffStats,
    pub seed: u64,
    pub last_report: SmoothingReport,
    layout: StatLayout,
}

impl<P: Clone> EstimatorState<P> {
    pub fn new<M: ModelSpec<Params = P>>(
        model: &M,
        init_theta: Theta<P>,
        kind: FilterKind,
        particles: usize,
        initial_state: &InitialState,
        initial_mode: &InitialMode,
        seed: u64,
    ) -> Result<Self> {
        let k_modes = model.num_modes();
        if init_theta.num_modes() != k_modes {
            return Err(Error::Dimension(format!(
                "initial parameter has {} modes, model has {k_modes}",
                init_theta.num_modes()
            )));
        }
        if initial_state.dim() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "initial state has dimension {}, model has {}",
                initial_state.dim(),
                model.state_dim()
            )));
        }
        if particles == 0 {
            return Err(Error::Config("at least one particle is required".into()));
        }
        let layout = StatLayout::for_model(model);
        let states = initial_state.draw(particles, seed)?;
        let alpha0 = initial_mode.probabilities(k_modes)?;
        let filter = match kind {
            FilterKind::RaoBlackwellized => FilterState::RaoBlackwellized(ParticleSystem::new(states, &alpha0, &layout)?),
            FilterKind::Joint => {
                let modes = (0..particles)
                    .map(|i| {
                        let mut rng = substream(seed, 0, i as u64);
                        ModeId::from_index(sample_index(&alpha0, &mut rng))
                    })
                    .collect();
                FilterState::Joint(JointSystem::new(states, modes, &layout)?)
            }
        };
        Ok(Self {
            theta: init_theta,
            filter,
            t: 0,
            stats: SuffStats::zeros(&layout),
            seed,
            last_report: SmoothingReport::default(),
            layout,
        })
    }

    pub fn layout(&self) -> &StatLayout {
        &self.layout
    }

    pub fn estimate(&self) -> Estimate {
        match &self.filter {
            FilterState::RaoBlackwellized(sys) => estimate(sys),
            FilterState::Joint(sys) => estimate_joint(sys, self.layout.num_modes()),
        }
    }

    pub fn num_particles(&self) -> usize {
        match &self.filter {
            FilterState::RaoBlackwellized(sys) => sys.len(),
            FilterState::Joint(sys) => sys.len(),
        }
    }
}

/// One online EM step with the bootstrap proposal.
pub fn em_step<M: ModelSpec>(
    state: &mut EstimatorState<M::Params>,
    y: &[f64],
    config: &EmConfig,
    model: &M,
) -> Result<()> {
    em_step_with_proposal(state, y, config, model, &BootstrapProposal)
}

/// One online EM step: advance the filter under the current estimate,
/// update the intermediate statistics, aggregate, and run the M-step once
/// `t >= burn_in` on every `update_period`-th step.
pub fn em_step_with_proposal<M: ModelSpec, Q: Proposal<M>>(
    state: &mut EstimatorState<M::Params>,
    y: &[f64],
    config: &EmConfig,
    model: &M,
    proposal: &Q,
) -> Result<()> {
    if y.len() != model.meas_dim() {
        return Err(Error::Dimension(format!(
            "observation has {} components, model expects {}",
            y.len(),
            model.meas_dim()
        )));
    }
    let t = state.t + 1;
    let gamma = config.schedule.gamma(t);
    let layout = &state.layout;
    let theta = &state.theta;
    let (stats, report) = match &mut state.filter {
        FilterState::RaoBlackwellized(sys) => {
            let trace = rbpf_step(sys, y, theta, model, proposal, config.resample_threshold, state.seed, layout)?;
            let report = match config.smoother {
                Smoother::ForwardSmoothing => fs_update(&trace.prev, &mut sys.particles, y, t, theta, gamma, model, layout),
                Smoother::PathBased => {
                    path_update(&trace.prev, &trace.ancestors, &mut sys.particles, y, t, theta, gamma, model, layout)
                }
            };
            (aggregate(sys, layout), report)
        }
        FilterState::Joint(sys) => {
            let trace = pf_step(sys, y, theta, model, config.resample_threshold, state.seed)?;
            let report = match config.smoother {
                Smoother::ForwardSmoothing => pf_fs_update(&trace.prev, &mut sys.particles, y, t, theta, gamma, model, layout),
                Smoother::PathBased => pf_path_update(&trace.prev, &trace.ancestors, &mut sys.particles, y, t, gamma, model, layout),
            };
            (aggregate_joint(sys, layout), report)
        }
    };
    state.t = t;
    if t >= config.burn_in && t % config.update_period == 0 {
        state.theta = mstep(&stats, &state.theta, &config.feasibility, model)?;
    }
    state.stats = stats;
    state.last_report = report;
    Ok(())
}

/// Per-step output: `[t, params..., state_mean..., mode_marginal...]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub params: Vec<f64>,
    pub state_mean: Vec<f64>,
    pub mode_marginal: Vec<f64>,
}

impl StepRecord {
    pub fn capture<M: ModelSpec>(state: &EstimatorState<M::Params>, model: &M) -> Self {
        let est = state.estimate();
        Self {
            t: state.t,
            params: model.param_columns(&state.theta).into_iter().map(|(_, v)| v).collect(),
            state_mean: est.state_mean,
            mode_marginal: est.mode_marginal,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().chain(&self.state_mean).chain(&self.mode_marginal).copied()
    }
}

/// Column names matching [`StepRecord`].
pub fn record_header<M: ModelSpec>(model: &M, theta: &Theta<M::Params>) -> Vec<String> {
    let mut header = vec!["t".to_string()];
    header.extend(model.param_columns(theta).into_iter().map(|(name, _)| name));
    header.extend((1..=model.state_dim()).map(|i| format!("xhat_{i}")));
    header.extend((1..=model.num_modes()).map(|k| format!("p_mode_{k}")));
    header
}

/// Single pass over an observation stream. Records go to `sink` as they are
/// produced; nothing proportional to the stream length is kept.
pub fn run<M, I, Y, F>(
    model: &M,
    observations: I,
    mut state: EstimatorState<M::Params>,
    config: &EmConfig,
    mut sink: F,
) -> Result<EstimatorState<M::Params>>
where
    M: ModelSpec,
    I: IntoIterator<Item = Y>,
    Y: AsRef<[f64]>,
    F: FnMut(&StepRecord) -> Result<()>,
{
    config.validate()?;
    for y in observations {
        em_step(&mut state, y.as_ref(), config, model)?;
        sink(&StepRecord::capture(&state, model))?;
    }
    Ok(state)
}
