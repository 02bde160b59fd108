use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fusenet::config::{validate_config, ExperimentConfig};
use fusenet::experiment::{evaluate_experiment, replot, run_experiment, summary_table};

/// Multimodal feature-fusion experiments on synthetic biometric data.
#[derive(Parser)]
#[command(name = "fusenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file, including a shape dry-run of every network.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and evaluate the full experiment matrix.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the configured run seeds with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Re-evaluate a finished run directory from its checkpoints.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Re-emit the CMC plot from a run directory's metrics CSV.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's file names, or metrics.csv / cmc.svg.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

const VALIDATION_FAILURE: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;

fn load(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    match validate_config(path) {
        Ok(mut c) => {
            if let Some(s) = seed_override {
                c.dataset.runs = vec![s];
            }
            Ok(c)
        }
        Err(issues) => {
            eprintln!("{}: invalid configuration", path.display());
            for i in issues {
                eprintln!("  {i}");
            }
            Err(ExitCode::from(VALIDATION_FAILURE))
        }
    }
}

fn runtime(result: anyhow::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(RUNTIME_FAILURE)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { VALIDATION_FAILURE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Validate { config } => match load(&config, None) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            out,
            seed_override,
        } => {
            let cfg = match load(&config, seed_override) {
                Ok(c) => c,
                Err(code) => return code,
            };
            runtime((|| {
                let summary = run_experiment(&cfg, &out, &mut |msg| eprintln!("{msg}"))
                    .with_context(|| format!("experiment failed; partial artifacts in {}", out.display()))?;
                print!("{}", summary_table(&cfg, &summary));
                Ok(())
            })())
        }
        Command::Eval {
            config,
            out,
            seed_override,
        } => {
            let cfg = match load(&config, seed_override) {
                Ok(c) => c,
                Err(code) => return code,
            };
            runtime((|| {
                let summary = evaluate_experiment(&cfg, &out)
                    .with_context(|| format!("re-evaluation of {} failed", out.display()))?;
                print!("{}", summary_table(&cfg, &summary));
                Ok(())
            })())
        }
        Command::Plot { out, config } => {
            let (csv, svg) = match config {
                Some(p) => match load(&p, None) {
                    Ok(c) => (c.eval.metrics_csv, c.eval.cmc_svg),
                    Err(code) => return code,
                },
                None => ("metrics.csv".to_string(), "cmc.svg".to_string()),
            };
            runtime((|| {
                let n = replot(&out.join(&csv), &out.join(&svg))?;
                println!("wrote {} with {n} curves", out.join(&svg).display());
                Ok(())
            })())
        }
    }
}
