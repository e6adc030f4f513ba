//! Command-line interface.
//!
//! `simulate` runs the Monte Carlo method comparison, `analyze` fits a
//! cohort file end to end, and `sample` draws and calibrates an
//! influence-balanced design.  Progress goes to standard error; results go
//! to files in the output directory and to standard output.  Exit codes:
//! 0 success, 1 validation, 2 numerical failure, 3 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use supercc::config::ExperimentConfig;
use supercc::error::{Error, EXIT_VALIDATION};
use supercc::io::render_estimates_csv;
use supercc::pipeline::{cmd_analyze, cmd_sample, cmd_simulate, describe_constraints, PipelineError};

#[derive(Parser)]
#[command(
    name = "supercc",
    version,
    about = "Supersampled case-cohort survival analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation study and write result, metric, and table files.
    Simulate {
        /// Configuration file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the study seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Compare only these methods (repeatable).
        #[arg(long)]
        method: Vec<String>,
        /// Override the replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads; 0 means all cores.  Results are identical at any
        /// setting.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the full-size study (cohort 25,000, 1,000 replicates).
        #[arg(long)]
        paper_scale: bool,
    },
    /// Analyze a cohort file; write pooled estimates (CSV and JSON).
    Analyze {
        /// Cohort file; overrides the config's `pipeline.cohort`.
        cohort: Option<PathBuf>,
        /// Configuration file (TOML) with the `[pipeline]` description.
        #[arg(long)]
        config: PathBuf,
        /// Override the pipeline seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 means all cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw and calibrate an influence-balanced design; write assignment
    /// and weight files.
    Sample {
        /// Cohort file; overrides the config's `pipeline.cohort`.
        cohort: Option<PathBuf>,
        /// Configuration file (TOML) with the `[pipeline]` description.
        #[arg(long)]
        config: PathBuf,
        /// Override the pipeline seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and succeed; anything
            // else is a validation failure.
            let code = if e.use_stderr() { EXIT_VALIDATION as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate {
            config,
            seed,
            method,
            replicates,
            threads,
            out,
            paper_scale,
        } => {
            let mut experiment = load_config(config.as_deref())?;
            let mut sim = experiment.simulate_config();
            if let Some(seed) = seed {
                sim.seed = seed;
            }
            if let Some(replicates) = replicates {
                sim.replicates = replicates;
            }
            experiment.simulate = Some(sim);
            if !method.is_empty() {
                experiment.methods = method;
            }
            if let Some(out) = out {
                experiment.output.directory = out;
            }
            let workers = threads.unwrap_or(experiment.output.threads);
            let table = with_threads(workers, || cmd_simulate(&experiment, paper_scale))?;
            println!("{table}");
            Ok(())
        }
        Command::Analyze {
            cohort,
            config,
            seed,
            threads,
            out,
        } => {
            let mut experiment = load_config(Some(&config))?;
            apply_pipeline_overrides(&mut experiment, cohort, seed, out)?;
            let workers = threads.unwrap_or(experiment.output.threads);
            let report = with_threads(workers, || cmd_analyze(&experiment))?;
            print!("{}", render_estimates_csv(&report));
            Ok(())
        }
        Command::Sample {
            cohort,
            config,
            seed,
            out,
        } => {
            let mut experiment = load_config(Some(&config))?;
            apply_pipeline_overrides(&mut experiment, cohort, seed, out)?;
            let design = cmd_sample(&experiment)?;
            for line in describe_constraints(&design) {
                println!("{line}");
            }
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_pipeline_overrides(
    experiment: &mut ExperimentConfig,
    cohort: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    if let Some(pipeline) = experiment.pipeline.as_mut() {
        if let Some(path) = cohort {
            pipeline.cohort = path;
        }
        if let Some(seed) = seed {
            pipeline.seed = seed;
        }
    } else {
        // A cohort path alone cannot describe the covariate schema.
        return Err(supercc::config::ConfigError::Invalid {
            detail: "this command needs a [pipeline] section in the config".into(),
        }
        .into());
    }
    if let Some(out) = out {
        experiment.output.directory = out;
    }
    Ok(())
}

/// Runs `f` on a Rayon pool of the requested size; 0 keeps the default pool
/// (all cores).  The estimates are identical at any size — only wall-clock
/// timing differs.
fn with_threads<T: Send>(
    threads: usize,
    f: impl FnOnce() -> Result<T, PipelineError> + Send,
) -> Result<T, PipelineError> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction cannot fail for positive sizes");
    pool.install(f)
}
