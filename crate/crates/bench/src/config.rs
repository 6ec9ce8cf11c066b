//! Experiment configuration: preset defaults, then a JSON file, then
//! `--set key=value` overrides, then explicit flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use switchem::{Algorithm, EmConfig, ModelSpec, StepSchedule};
use switchem::scenarios::Scenario;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Benchmark,
    JmlsFailure,
    CvPositioning,
    /// Linear Gaussian model read from `model_file`.
    Custom,
}

/// Whether Monte Carlo repetitions share one data batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Fixed,
    Fresh,
}

/// Every knob of an experiment. `None` means "use the scenario preset".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub model_file: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    pub runs: usize,
    pub seed: u64,
    pub data_mode: DataMode,
    /// Seed of the fixed data batch; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub step_exponent: Option<f64>,
    pub burn_in: Option<usize>,
    pub update_period: Option<usize>,
    pub resample_threshold: Option<f64>,
    pub var_floor: Option<f64>,
    pub var_cap: Option<f64>,
    pub tpm_floor: Option<f64>,
    pub out: PathBuf,
    /// Fraction of the run excluded from the time-averaged variance.
    pub burn_fraction: f64,
    pub time_algorithms: Vec<Algorithm>,
    pub time_particles: Vec<usize>,
    pub warmup: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Benchmark,
            model_file: None,
            algorithm: Algorithm::RbpfPath,
            particles: None,
            steps: None,
            runs: 1,
            seed: 0,
            data_mode: DataMode::Fixed,
            data_seed: None,
            step_exponent: None,
            burn_in: None,
            update_period: None,
            resample_threshold: None,
            var_floor: None,
            var_cap: None,
            tpm_floor: None,
            out: PathBuf::from("out"),
            burn_fraction: 0.0,
            time_algorithms: Algorithm::ALL.to_vec(),
            time_particles: vec![150, 300],
            warmup: 100,
        }
    }
}

/// Flags that override everything else when present.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub algorithm: Option<Algorithm>,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
}

/// Deep merge of `patch` into `base`; objects merge key by key, anything
/// else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `key.path=value`; the value is parsed as JSON and falls back to
/// a plain string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.split('.').rev() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty path segment in {key:?}")));
        }
        let mut obj = Map::new();
        obj.insert(part.to_string(), patch);
        patch = Value::Object(obj);
    }
    merge(root, patch);
    Ok(())
}

impl ExperimentConfig {
    pub fn load(file: Option<&Path>, sets: &[String], flags: &FlagOverrides) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(Self::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, patch);
        }
        for s in sets {
            apply_set(&mut root, s)?;
        }
        let mut cfg: Self = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(v) = &flags.out {
            cfg.out = v.clone();
        }
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = flags.runs {
            cfg.runs = v;
        }
        if let Some(v) = flags.algorithm {
            cfg.algorithm = v;
        }
        if let Some(v) = flags.particles {
            cfg.particles = Some(v);
        }
        if let Some(v) = flags.steps {
            cfg.steps = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.particles == Some(0) {
            return Err(CliError::Config("particles must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_fraction) {
            return Err(CliError::Config(format!("burn_fraction {} outside [0, 1)", self.burn_fraction)));
        }
        if self.scenario == ScenarioKind::Custom && self.model_file.is_none() {
            return Err(CliError::Config("custom scenario requires model_file".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Scenario preset with this configuration's overrides applied.
    pub fn apply<M: ModelSpec>(&self, mut s: Scenario<M>) -> Result<Scenario<M>, CliError> {
        if let Some(n) = self.particles {
            s.particles = n;
        }
        if let Some(n) = self.steps {
            s.steps = n;
        }
        let em: &mut EmConfig = &mut s.em;
        if let Some(a) = self.step_exponent {
            em.schedule = StepSchedule::new(a)?;
        }
        if let Some(b) = self.burn_in {
            em.burn_in = b;
        }
        if let Some(p) = self.update_period {
            em.update_period = p;
        }
        if let Some(r) = self.resample_threshold {
            em.resample_threshold = r;
        }
        if let Some(v) = self.var_floor {
            em.feasibility.var_floor = v;
        }
        if let Some(v) = self.var_cap {
            em.feasibility.var_cap = Some(v);
        }
        if let Some(v) = self.tpm_floor {
            em.feasibility.tpm_floor = v;
        }
        em.smoother = self.algorithm.smoother();
        em.validate()?;
        Ok(s)
    }
}
