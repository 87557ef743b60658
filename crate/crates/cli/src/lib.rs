//! Batch experiment runner around `gradpf-core`: data synthesis and
//! ingestion, likelihood sweeps, particle MCMC and chain diagnostics.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use commands::RunOptions;
use config::ExperimentConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gradpf", version, about = "Differentiable particle filter experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate observations from model.theta.
    Synth(CommonArgs),
    /// Convert a price series to percentage log-returns.
    Ingest(CommonArgs),
    /// Evaluate log-likelihood and gradient along a parameter grid.
    Sweep(CommonArgs),
    /// Run particle MCMC chains and their diagnostics.
    Sample(CommonArgs),
    /// Recompute diagnostics for stored chains.
    Diagnose(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for chains and grid points.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; overrides io.out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Synth(a) => ("synth", a),
            Command::Ingest(a) => ("ingest", a),
            Command::Sweep(a) => ("sweep", a),
            Command::Sample(a) => ("sample", a),
            Command::Diagnose(a) => ("diagnose", a),
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let (name, args) = cli.command.parts();
    let cfg = ExperimentConfig::load(&args.config)?;
    let opts = RunOptions {
        seed: args.seed.unwrap_or(cfg.seed),
        jobs: args.jobs,
        out: args
            .out
            .clone()
            .or_else(|| cfg.io.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Synth(_) => commands::synth::run(&cfg, &opts),
        Command::Ingest(_) => commands::ingest::run(&cfg, &opts),
        Command::Sweep(_) => commands::sweep::run(&cfg, &opts),
        Command::Sample(_) => commands::sample::run(&cfg, &opts),
        Command::Diagnose(_) => commands::diagnose::run(&cfg, &opts),
    };
    log::info!("{name} finished in {:.3}s", start.elapsed().as_secs_f64());
    result
}
