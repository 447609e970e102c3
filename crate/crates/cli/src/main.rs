//! `sscl`: data generation, pretraining, linear probing, ablations and
//! gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "sscl", version, about = "Contrastive pretraining with synthetic hard negatives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Blobs,
    Rings,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV.
    GenData {
        #[arg(long, value_enum, default_value = "blobs")]
        kind: DataKind,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Feature dimension (blobs only; rings are 2-D).
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 512)]
        per_class: usize,
        /// Blob standard deviation, or ring coordinate noise.
        #[arg(long, default_value_t = 0.35)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder; writes config.toml, metrics.csv and checkpoint.bin.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path override, e.g. `loss.mode=baseline`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Use a dataset CSV instead of the configured source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write one JSON line per anchor per step with its sampled negatives.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Fit a linear probe on frozen encoder features and report accuracy.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Report CSV; defaults to `probe_report.csv` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Export test-split features as CSV.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Export a 2-D PCA of the test-split features as CSV.
        #[arg(long)]
        pca: Option<PathBuf>,
    },
    /// Run every loss mode over several seeds and tabulate probe accuracy.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dataset CSV; defaults to the configured source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Run the mode x seed grid in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of the full objective on a small random model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Also write a JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData {
            kind,
            classes,
            dim,
            per_class,
            spread,
            seed,
            out,
        } => commands::gen_data(kind, classes, dim, per_class, spread, seed, &out),
        Command::Pretrain {
            config,
            overrides,
            data,
            out_dir,
            audit,
        } => commands::pretrain(config.as_deref(), &overrides, data, out_dir, audit.as_deref()),
        Command::Probe {
            checkpoint,
            data,
            out,
            epochs,
            lr,
            embeddings,
            pca,
        } => commands::probe(&commands::ProbeArgs {
            checkpoint,
            data,
            out,
            epochs,
            lr,
            embeddings,
            pca,
        }),
        Command::Compare {
            config,
            overrides,
            data,
            seeds,
            out_dir,
            parallel,
        } => commands::compare(config.as_deref(), &overrides, data, seeds, out_dir, parallel),
        Command::Gradcheck {
            seed,
            threshold,
            eps,
            out,
        } => commands::gradcheck(seed, threshold, eps, out.as_deref()),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || matches!(
                e.downcast_ref::<sscl_core::Error>(),
                Some(sscl_core::Error::InvalidConfig(_) | sscl_core::Error::InvalidTau(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<commands::ThresholdExceeded>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
