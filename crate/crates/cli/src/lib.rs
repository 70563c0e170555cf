//! Config-driven runner for iterated-learning experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{Outcome, RunOptions};
pub use config::ExperimentConfig;
pub use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "priorprobe", version, about = "Iterated-learning sweeps and the initial-value diagnostic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Root directory for run directories; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Maximum number of chains run concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Replaces `sweep.seed`.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

impl CommonArgs {
    fn options(&self) -> RunOptions {
        RunOptions { out: self.out.clone(), parallelism: self.parallelism, seed_override: self.seed_override }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a sweep with a simulated agent.
    Simulate(CommonArgs),
    /// Exact Markov-chain analysis of a deterministic agent.
    Analyze(CommonArgs),
    /// Classify a run directory, or simulate and classify a config.
    Diagnose(DiagnoseArgs),
    /// Run a sweep against a live chat-completions endpoint.
    Elicit(CommonArgs),
    /// Rerun a sweep from the exchange cache only.
    Replay(CommonArgs),
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Existing run directory to diagnose.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub seed_override: Option<u64>,
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&a.config, &a.options()),
        Command::Analyze(a) => commands::analyze(&a.config, &a.options()),
        Command::Elicit(a) => commands::elicit(&a.config, &a.options()),
        Command::Replay(a) => commands::replay(&a.config, &a.options()),
        Command::Diagnose(a) => match (&a.run, &a.config) {
            (Some(dir), _) => commands::diagnose_run(dir),
            (None, Some(config)) => {
                let opts = RunOptions { out: a.out.clone(), parallelism: a.parallelism, seed_override: a.seed_override };
                commands::diagnose_config(config, &opts)
            }
            (None, None) => Err(CliError::config("diagnose needs --run or --config")),
        },
    }
}
