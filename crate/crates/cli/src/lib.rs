//! Library behind the `nngp` command-line tool: configuration, file formats
//! and the subcommands.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "nngp",
    version,
    about = "NNGP regression on the sphere: fit, map, evaluate and design"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic observation table.
    Simulate,
    /// Fit the model and write the chain and artifact.
    Fit,
    /// Map the posterior predictive and integrate it.
    Predict,
    /// Rank candidate measurement sites.
    Design,
    /// Score models on random holdout sets.
    Evaluate,
    /// Recompute convergence diagnostics for a stored chain.
    Diagnose,
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let path = path.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs one subcommand and returns its summary line.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, out),
        Command::Fit => commands::fit(&cfg, out),
        Command::Predict => commands::predict(&cfg, out),
        Command::Design => commands::design(&cfg, out),
        Command::Evaluate => commands::evaluate(&cfg, out),
        Command::Diagnose => commands::diagnose(&cfg, out),
    }
}
