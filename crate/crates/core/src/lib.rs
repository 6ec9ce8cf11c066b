//! Online EM for jump Markov nonlinear systems with Rao-Blackwellized
//! particle filters.
//!
//! The mode chain is marginalized per particle by a small HMM filter while
//! the continuous state is sampled. Sufficient statistics are smoothed
//! forward-only, either over the whole previous particle system
//! ([`smoothing::fs_update`]) or along ancestral paths
//! ([`smoothing::path_update`]), and fed to a closed-form M-step.
//! Joint-sampling baselines live in [`baseline`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod model;
pub mod numerics;
pub mod rbpf;
pub mod rng;
pub mod scenarios;
pub mod simulate;
pub mod smoothing;

pub use em::{
    em_step, record_header, run, Algorithm, EmConfig, EstimatorState, FilterKind, InitialMode, InitialState, Smoother,
    StepRecord, StepSchedule,
};
pub use error::{Error, Result};
pub use gaussian::{Dynamics, GaussianChannel, GaussianModeParams, GaussianModel, LinearDynamics, NoiseChannels};
pub use model::{mstep, FeasibilityConfig, ModeId, ModelSpec, StatLayout, SuffStats, Theta, TransitionMatrix};
pub use simulate::{simulate, Trajectory};

