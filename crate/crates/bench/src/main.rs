use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use switchem::Algorithm;
use switchem_bench::commands::{cmd_estimate, cmd_mcvar, cmd_run, cmd_simulate, cmd_time, RunOutcome};
use switchem_bench::{CliError, ExperimentConfig, FlagOverrides};

#[derive(Parser)]
#[command(name = "switchem", version, about = "Online EM with Rao-Blackwellized particle filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set burn_in=50`.
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// pf_path, pf_fs, rbpf_path or rbpf_fs.
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate data and write one record file per Monte Carlo run.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Time-averaged across-run variance of parameter estimates.
    Mcvar {
        /// Record files; defaults to run_*.csv in the output directory.
        files: Vec<PathBuf>,
        #[arg(long)]
        burn_fraction: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Milliseconds per EM step for each algorithm and particle count.
    Time {
        #[command(flatten)]
        common: Common,
    },
    /// Stream an observation CSV through the estimator.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a simulated trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, extra_sets: Vec<String>) -> Result<ExperimentConfig, CliError> {
    let flags = FlagOverrides {
        out: common.out.clone(),
        seed: common.seed,
        runs: common.runs,
        algorithm: common.algorithm,
        particles: common.particles,
        steps: common.steps,
    };
    let mut sets = common.set.clone();
    sets.extend(extra_sets);
    ExperimentConfig::load(common.config.as_deref(), &sets, &flags)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { common } => {
            let cfg = load(&common, Vec::new())?;
            let summary = cmd_run(&cfg)?;
            println!("wrote {} run file(s) to {}", summary.files.len(), cfg.out.display());
            if !summary.collapsed.is_empty() {
                for (j, t) in &summary.collapsed {
                    eprintln!("run {j}: filter collapsed at t={t}");
                }
                return Err(CliError::Collapsed { runs: summary.collapsed.len() });
            }
            Ok(())
        }
        Command::Mcvar { files, burn_fraction, common } => {
            let extra = burn_fraction.map(|b| vec![format!("burn_fraction={b}")]).unwrap_or_default();
            let cfg = load(&common, extra)?;
            let report = cmd_mcvar(&cfg, &files)?;
            print!("{report}");
            Ok(())
        }
        Command::Time { common } => {
            let cfg = load(&common, Vec::new())?;
            let rows = cmd_time(&cfg)?;
            println!("{:<10} {:>9} {:>12}", "algorithm", "particles", "ms/step");
            for r in rows {
                println!("{:<10} {:>9} {:>12.4}", r.algorithm.name(), r.particles, r.ms_per_step);
            }
            Ok(())
        }
        Command::Estimate { input, common } => {
            let cfg = load(&common, Vec::new())?;
            let (path, outcome) = cmd_estimate(&cfg, &input)?;
            println!("wrote {}", path.display());
            match outcome {
                RunOutcome::Completed => Ok(()),
                RunOutcome::Collapsed { t } => {
                    eprintln!("filter collapsed at t={t}");
                    Err(CliError::Collapsed { runs: 1 })
                }
            }
        }
        Command::Simulate { common } => {
            let cfg = load(&common, Vec::new())?;
            let path = cmd_simulate(&cfg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("switchem: {e}");
            e.exit_code()
        }
    }
}
