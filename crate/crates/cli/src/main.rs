//! `puupl` command-line runner.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use puupl::experiment::{evaluate_snapshot, parse_config, run_experiment, sweep};
use puupl::PuError;

#[derive(Parser)]
#[command(name = "puupl", version, about = "Positive-unlabeled learning with uncertainty-aware pseudo-labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds to run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run one experiment per value of a dotted config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted key, e.g. `puupl.prior`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a saved `theta_star.bin` on labeled data.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        /// CSV file, or IDX images when `--labels` is given.
        #[arg(long)]
        data: PathBuf,
        /// IDX labels file.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn exit_code(e: &PuError) -> u8 {
    match e {
        PuError::Config { .. } => 2,
        PuError::Numeric(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> puupl::Result<()> {
    match cli.command {
        Command::Train { config, seed, jobs } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let summary = run_experiment(&cfg, jobs)?;
            println!(
                "accuracy {:.4} ± {:.4}  ece {:.4} ± {:.4}  ({} seeds, {})",
                summary.accuracy.mean,
                summary.accuracy.stderr,
                summary.ece.mean,
                summary.ece.stderr,
                summary.seeds.len(),
                cfg.resolved_output_dir().display()
            );
        }
        Command::Sweep { config, param, values, jobs } => {
            for row in sweep(&config, &param, &values, jobs)? {
                let s = &row.summary;
                println!(
                    "{param}={}: accuracy {:.4} ± {:.4}  ece {:.4} ± {:.4}",
                    row.value, s.accuracy.mean, s.accuracy.stderr, s.ece.mean, s.ece.stderr
                );
            }
        }
        Command::Eval { snapshot, data, labels, bins } => {
            if bins == 0 {
                return Err(PuError::config("bins", "must be positive"));
            }
            let report = evaluate_snapshot(&snapshot, &data, labels.as_deref(), bins)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
