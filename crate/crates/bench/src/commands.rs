//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use switchem::io::{read_record_table, write_trajectory, ObservationReader, RecordTable, RecordWriter};
use switchem::rng::derive_seed;
use switchem::scenarios::{benchmark_model, cv_positioning_model, jmls_failure_model, CustomModelFile, Scenario};
use switchem::{
    em_step, record_header, simulate, Algorithm, EstimatorState, Error, ModelSpec, StepRecord, Trajectory,
};

use crate::config::{DataMode, ExperimentConfig, ScenarioKind};
use crate::error::CliError;
use crate::mcvar::{mc_variance, McVarianceReport};

/// Tag separating simulated-data randomness from filter randomness.
const DATA_TAG: u64 = 0x6461_7461;

/// Seed actually fed to the simulator for a data batch seed.
pub fn simulator_seed(data_seed: u64) -> u64 {
    derive_seed(data_seed, DATA_TAG)
}

fn load_custom(cfg: &ExperimentConfig) -> Result<Scenario<switchem::GaussianModel<switchem::LinearDynamics>>, CliError> {
    let path = cfg.model_file.as_ref().ok_or_else(|| CliError::Config("custom scenario requires model_file".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: CustomModelFile =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(file.into_scenario()?)
}

/// Runs `$body` with `$s` bound to the configured scenario.
macro_rules! with_scenario {
    ($cfg:expr, $s:ident => $body:expr) => {
        match $cfg.scenario {
            ScenarioKind::Benchmark => {
                let $s = $cfg.apply(benchmark_model())?;
                $body
            }
            ScenarioKind::JmlsFailure => {
                let $s = $cfg.apply(jmls_failure_model())?;
                $body
            }
            ScenarioKind::CvPositioning => {
                let $s = $cfg.apply(cv_positioning_model())?;
                $body
            }
            ScenarioKind::Custom => {
                let $s = $cfg.apply(load_custom($cfg)?)?;
                $body
            }
        }
    };
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("SWITCHEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Simulates `steps` observations of the scenario truth.
pub fn simulate_scenario<M: ModelSpec>(s: &Scenario<M>, data_seed: u64) -> Result<Trajectory, CliError> {
    Ok(simulate(&s.model, &s.truth, s.steps, &s.initial_state, &s.true_initial_mode, simulator_seed(data_seed))?)
}

/// Outcome of streaming one estimator over a data set.
#[derive(Clone, Debug, PartialEq)]
pub enum RunOutcome {
    Completed,
    Collapsed { t: usize },
}

/// Streams `observations` through a fresh estimator, writing one record per
/// step. A filter collapse is recorded as a trailer comment.
pub fn estimate_stream<M, W, I>(
    s: &Scenario<M>,
    algorithm: Algorithm,
    seed: u64,
    observations: I,
    out: W,
) -> Result<RunOutcome, CliError>
where
    M: ModelSpec,
    W: Write,
    I: IntoIterator<Item = Result<Vec<f64>, Error>>,
{
    let mut em = s.em.clone();
    em.smoother = algorithm.smoother();
    em.validate()?;
    let mut writer = RecordWriter::new(out, &record_header(&s.model, &s.init))?;
    let mut state = EstimatorState::new(
        &s.model,
        s.init.clone(),
        algorithm.filter_kind(),
        s.particles,
        &s.initial_state,
        &s.initial_mode,
        seed,
    )?;
    for y in observations {
        let y = y.map_err(|e| CliError::core("input", e))?;
        match em_step(&mut state, &y, &em, &s.model) {
            Ok(()) => writer.write(&StepRecord::capture(&state, &s.model))?,
            Err(Error::FilterCollapse { t, .. }) => {
                writer.comment(&format!("collapsed at t={t}"))?;
                writer.finish()?;
                return Ok(RunOutcome::Collapsed { t });
            }
            Err(e) => return Err(CliError::core(format!("step {}", state.t + 1), e)),
        }
    }
    writer.finish()?;
    Ok(RunOutcome::Completed)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    /// `(run index, collapse time)`.
    pub collapsed: Vec<(usize, usize)>,
}

/// Writes `run_{j}.csv` for `j in 0..runs`, run `j` using seed `seed + j`.
/// With fixed data all runs see `data.csv`; with fresh data run `j` sees
/// `data_{j}.csv` simulated from seed `seed + j`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    create_out_dir(&cfg.out)?;
    with_scenario!(cfg, s => run_scenario(cfg, &s))
}

fn run_scenario<M: ModelSpec>(cfg: &ExperimentConfig, s: &Scenario<M>) -> Result<RunSummary, CliError> {
    let fixed = match cfg.data_mode {
        DataMode::Fixed => {
            let traj = simulate_scenario(s, cfg.data_seed())?;
            let path = cfg.out.join("data.csv");
            write_trajectory(&traj, &s.mode_labels, create_file(&path)?)?;
            Some(traj)
        }
        DataMode::Fresh => None,
    };
    let pool = thread_pool()?;
    let outcomes: Vec<Result<(PathBuf, RunOutcome), CliError>> = pool.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|j| {
                let seed = cfg.seed.wrapping_add(j as u64);
                let fresh;
                let data = match &fixed {
                    Some(t) => t,
                    None => {
                        fresh = simulate_scenario(s, seed)?;
                        let path = cfg.out.join(format!("data_{j}.csv"));
                        write_trajectory(&fresh, &s.mode_labels, create_file(&path)?)?;
                        &fresh
                    }
                };
                let path = cfg.out.join(format!("run_{j}.csv"));
                let out = create_file(&path)?;
                let outcome = estimate_stream(s, cfg.algorithm, seed, data.y.iter().cloned().map(Ok), out)?;
                Ok((path, outcome))
            })
            .collect()
    });
    let mut summary = RunSummary::default();
    for (j, r) in outcomes.into_iter().enumerate() {
        let (path, outcome) = r?;
        summary.files.push(path);
        if let RunOutcome::Collapsed { t } = outcome {
            summary.collapsed.push((j, t));
        }
    }
    Ok(summary)
}

/// Writes `data.csv` simulated from the configured data seed.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    create_out_dir(&cfg.out)?;
    with_scenario!(cfg, s => {
        let traj = simulate_scenario(&s, cfg.data_seed())?;
        let path = cfg.out.join("data.csv");
        write_trajectory(&traj, &s.mode_labels, create_file(&path)?)?;
        Ok(path)
    })
}

/// Single-pass estimation over a CSV with `y_1..y_dy` columns, written to
/// `estimate.csv`.
pub fn cmd_estimate(cfg: &ExperimentConfig, input: &Path) -> Result<(PathBuf, RunOutcome), CliError> {
    create_out_dir(&cfg.out)?;
    let file = File::open(input).map_err(|e| CliError::io(input, e))?;
    with_scenario!(cfg, s => {
        let reader = ObservationReader::new(std::io::BufReader::new(file), s.model.meas_dim())
            .map_err(|e| CliError::core(input.display().to_string(), e))?;
        let path = cfg.out.join("estimate.csv");
        let outcome = estimate_stream(&s, cfg.algorithm, cfg.seed, reader, create_file(&path)?)
            .map_err(|e| match e {
                CliError::Core { context, source } if context == "input" => {
                    CliError::core(input.display().to_string(), source)
                }
                other => other,
            })?;
        Ok((path, outcome))
    })
}

/// Reads record files and writes `mcvar.csv`.
pub fn cmd_mcvar(cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<McVarianceReport, CliError> {
    let files = if files.is_empty() { discover_runs(&cfg.out)? } else { files.to_vec() };
    let tables = files
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| CliError::io(p, e))?;
            read_record_table(std::io::BufReader::new(f)).map_err(|e| CliError::core(p.display().to_string(), e))
        })
        .collect::<Result<Vec<RecordTable>, CliError>>()?;
    let report = mc_variance(&tables, cfg.burn_fraction)?;
    create_out_dir(&cfg.out)?;
    let path = cfg.out.join("mcvar.csv");
    let mut w = create_file(&path)?;
    report.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

/// `run_{j}.csv` files in `dir`, ordered by `j`.
fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut runs: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let j = name.strip_prefix("run_")?.strip_suffix(".csv")?.parse().ok()?;
            Some((j, e.path()))
        })
        .collect();
    runs.sort();
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub algorithm: Algorithm,
    pub particles: usize,
    pub ms_per_step: f64,
}

/// Wall-clock milliseconds per EM step over `ys[warmup..]`, after running
/// the first `warmup` observations untimed.
pub fn time_algorithm<M: ModelSpec>(
    s: &Scenario<M>,
    algorithm: Algorithm,
    particles: usize,
    warmup: usize,
    ys: &[Vec<f64>],
    seed: u64,
) -> Result<f64, CliError> {
    let mut em = s.em.clone();
    em.smoother = algorithm.smoother();
    let mut state = EstimatorState::new(
        &s.model,
        s.init.clone(),
        algorithm.filter_kind(),
        particles,
        &s.initial_state,
        &s.initial_mode,
        seed,
    )?;
    let warmup = warmup.min(ys.len());
    for y in &ys[..warmup] {
        em_step(&mut state, y, &em, &s.model)?;
    }
    let timed = &ys[warmup..];
    let start = Instant::now();
    for y in timed {
        em_step(&mut state, y, &em, &s.model)?;
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok(if timed.is_empty() { 0.0 } else { elapsed / timed.len() as f64 })
}

/// Times every algorithm/particle-count pair sequentially and writes
/// `time.csv`. Timed steps default to 1000 unless `steps` is set.
pub fn cmd_time(cfg: &ExperimentConfig) -> Result<Vec<TimingRow>, CliError> {
    create_out_dir(&cfg.out)?;
    let steps = cfg.steps.unwrap_or(1000);
    let rows = if steps == 0 || cfg.time_particles.is_empty() || cfg.time_algorithms.is_empty() {
        Vec::new()
    } else {
        with_scenario!(cfg, s => {
            let mut s = s;
            s.steps = cfg.warmup + steps;
            let data = simulate_scenario(&s, cfg.data_seed())?;
            let mut rows = Vec::new();
            for &np in &cfg.time_particles {
                for &alg in &cfg.time_algorithms {
                    let ms = time_algorithm(&s, alg, np, cfg.warmup, &data.y, cfg.seed)?;
                    rows.push(TimingRow { algorithm: alg, particles: np, ms_per_step: ms });
                }
            }
            rows
        })
    };
    let path = cfg.out.join("time.csv");
    let mut w = create_file(&path)?;
    let written: std::io::Result<()> = (|| {
        writeln!(w, "algorithm,particles,ms_per_step")?;
        for r in &rows {
            writeln!(w, "{},{},{}", r.algorithm, r.particles, r.ms_per_step)?;
        }
        w.flush()
    })();
    written.map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
