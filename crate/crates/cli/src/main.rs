//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on runtime
//! failures. Log verbosity comes from the `FEDNOVEL_LOG` environment
//! variable (`error`, `warn`, `info`, `debug`, `trace`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fednovel::experiment::{
    emit_metrics, evaluate_checkpoint, run_estimate, run_experiment, ExperimentConfig,
};
use fednovel::model::Checkpoint;

#[derive(Parser)]
#[command(name = "fednovel", version, about = "Federated continual novel-class learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write metrics artifacts.
    Run {
        /// Path to the experiment JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the novel class count per stage (no novel training rounds).
    Estimate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved model checkpoint against the configured data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, u8> {
    match ExperimentConfig::load(path) {
        Ok(config) => Ok(config),
        Err(e) => {
            eprintln!("error: {e}");
            Err(if matches!(e, fednovel::Error::Io { .. }) {
                EXIT_RUNTIME
            } else {
                EXIT_CONFIG
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), u8> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let out_dir = out
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            log::info!("running {} seed(s)", cfg.seeds.len());
            let report = run_experiment(&cfg).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            })?;
            for seed in &report.seeds {
                for stage in &seed.stages {
                    println!(
                        "seed {} stage {}: known {:.4} novel {} all {:.4} forgetting {:.4} est {}",
                        seed.seed,
                        stage.stage,
                        stage.known_acc,
                        stage
                            .novel_acc
                            .map(|v| format!("{v:.4}"))
                            .unwrap_or_else(|| "-".into()),
                        stage.overall_acc,
                        stage.forgetting,
                        stage
                            .est_count
                            .map(|v| v.to_string())
                            .unwrap_or_else(|| "-".into()),
                    );
                }
            }
            let written = emit_metrics(&report, &out_dir).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            })?;
            println!("wall clock: {:.2}s", report.wall_clock_secs);
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Estimate { config } => {
            let cfg = load_config(&config)?;
            let rows = run_estimate(&cfg).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            })?;
            for (seed, stage, est, truth) in rows {
                println!("seed {seed} stage {stage}: estimated {est} (true {truth})");
            }
            Ok(())
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let ckpt = Checkpoint::load(&checkpoint).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            })?;
            let report = evaluate_checkpoint(&cfg, ckpt).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            })?;
            println!("seed {}: known {:.4}", report.seed, report.known_acc);
            for row in &report.per_stage {
                println!(
                    "stage {}: novel {:.4} all {:.4}",
                    row.stage, row.novel_acc, row.overall_acc
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FEDNOVEL_LOG", "warn"))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
