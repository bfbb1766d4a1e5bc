//! Command-line driver for barycenter flows, solver comparisons on
//! location-scatter families, domain-adaptation ablations and dataset
//! generation. Every command reads a TOML config and writes its artifacts
//! to the configured output directory.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod inputs;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "BARYFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "baryflow", version, about = "Wasserstein barycenters by gradient flow")]
pub struct Cli {
    /// Worker threads for solver parallelism.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an empirical or mixture flow on the configured inputs.
    Barycenter { config: PathBuf },
    /// Compare solvers on a location-scatter family.
    Toy { config: PathBuf },
    /// Run the domain-adaptation ablation.
    Msda { config: PathBuf },
    /// Generate a dataset.
    Gen { config: PathBuf },
    /// Check a config file without running it.
    Validate {
        #[arg(value_enum)]
        kind: commands::ConfigKind,
        config: PathBuf,
    },
}

/// Size the global worker pool.
pub fn init_threads(threads: Option<usize>) -> CliResult<()> {
    match threads {
        Some(0) => Err(CliError::config("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size the worker pool: {e}"))),
        None => Ok(()),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Barycenter { config } => commands::barycenter(&config),
        Command::Toy { config } => commands::toy(&config),
        Command::Msda { config } => commands::msda(&config),
        Command::Gen { config } => commands::gen(&config),
        Command::Validate { kind, config } => commands::validate(kind, &config),
    }
}
