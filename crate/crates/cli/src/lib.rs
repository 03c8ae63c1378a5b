//! Operator surface for training, evaluation, diagnostics and verification.
//!
//! Exit statuses: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 numeric abort, 4 verification failure.

pub mod commands;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{load_config, CliError, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "linda", version, about = "Awareness-decomposition value factorization on Level-Based Foraging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Config file (`key = value` text, or a run manifest `.json`).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed(s); a comma-separated list runs one job per seed.
    #[arg(long, value_name = "N[,N...]", value_delimiter = ',')]
    pub seed: Vec<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics, manifest and checkpoints under `--out/seed_<N>`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR", default_value = "runs")]
        out: PathBuf,
    },
    /// Greedy decentralized evaluation of a checkpoint; prints a JSON report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
    },
    /// Dump per-step awareness embeddings and the variance series.
    ExportAwareness {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, value_name = "DIR", default_value = "awareness")]
        out: PathBuf,
    },
    /// Run a property suite and print one JSON line per check.
    Verify {
        #[arg(value_enum)]
        suite: verify::Suite,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Negative control: perturb the analytic gradients before comparing.
        #[arg(long)]
        corrupt_backward: bool,
    },
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
