//! Experiment harness for the `switchem` library: configuration, Monte
//! Carlo repetitions, variance reports and runtime tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod mcvar;

pub use config::{DataMode, ExperimentConfig, FlagOverrides, ScenarioKind};
pub use error::CliError;
pub use mcvar::{mc_variance, McVarianceReport};
