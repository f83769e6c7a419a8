//! Command-line harness for skoplab experiments.
//!
//! The binary is a thin wrapper around [`run`], which tests call directly.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use skoplab::exec::{self, Execution};

pub use error::{CliError, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "skoplab", version, about = "Query-space steering and key-orthogonal projection lab")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides SKOPLAB_SEED and the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for the data-parallel stages.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write seeded random weights.
    InitModel,
    /// Build mean-difference steering vectors from the contrastive corpora.
    BuildSteering,
    /// Compute per-head projectors and risk scores.
    Calibrate,
    /// Compare vanilla, SKOP and key-invariant steering.
    Compare,
    /// Emit the planted-cluster corpus, model and ground truth.
    Synth,
}

/// Runs one subcommand and returns its stdout text.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> Result<String, CliError> {
    let mut config = match &cli.config {
        Some(path) => config::load(path)?,
        None => config::parse("", &std::env::current_dir().map_err(|e| CliError::io(".".as_ref(), e))?)?,
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if cli.threads == Some(0) {
        return Err(CliError::invalid("--threads must be at least 1"));
    }
    let seed = config::resolve_seed(cli.seed, env_seed, config.seed)?;
    let ctx = commands::Context {
        config,
        seed,
        exec: Execution::default(),
    };
    let command = cli.command;
    exec::with_threads(cli.threads, || match command {
        Command::InitModel => commands::cmd_init_model(&ctx),
        Command::BuildSteering => commands::cmd_build_steering(&ctx),
        Command::Calibrate => commands::cmd_calibrate(&ctx),
        Command::Compare => commands::cmd_compare(&ctx),
        Command::Synth => commands::cmd_synth(&ctx),
    })
}
