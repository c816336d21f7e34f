//! `sefcn` - one binary for the whole experiment loop: synthesize data,
//! train, evaluate, audit parameter counts, and dump excitation gates.
//!
//! Exit codes are the only machine-readable success signal:
//! 0 success, 2 configuration/validation error, 3 I/O or file-format error,
//! 4 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sefcn_core::{Result, SefcnError};

use crate::config::RunConfig;

/// Encoder/decoder segmentation networks with squeeze-&-excitation gates.
#[derive(Parser)]
#[command(name = "sefcn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by [data.generate]
    GenData(CommonArgs),
    /// Train the configured network and write a run directory
    Train(CommonArgs),
    /// Evaluate a checkpoint on the configured eval split
    Eval(CommonArgs),
    /// Report parameter counts under modes none/cse/sse/scse
    CountParams(CommonArgs),
    /// Dump spatial excitation gates of a checkpoint as PGM images
    InspectExcitation(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Checkpoint to load (eval, inspect-excitation)
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Input tensor (.tns) for inspect-excitation; defaults to the first
    /// sample of the eval split
    #[arg(long, value_name = "PATH")]
    sample: Option<PathBuf>,
    /// Seed override; precedence is flag > SEFCN_SEED > config file
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration (defaults and seed override
    /// applied) and exit
    #[arg(long)]
    print_config: bool,
}

fn exit_code(e: &SefcnError) -> u8 {
    match e {
        SefcnError::Config(_) | SefcnError::InvalidShape(_) | SefcnError::InvalidInput(_) => 2,
        SefcnError::Io { .. } | SefcnError::Format { .. } => 3,
        SefcnError::Divergence(_) => 4,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let (Command::GenData(args)
    | Command::Train(args)
    | Command::Eval(args)
    | Command::CountParams(args)
    | Command::InspectExcitation(args)) = &cli.command;

    let mut cfg = RunConfig::load(&args.config)?;
    let env_seed = std::env::var("SEFCN_SEED").ok();
    cfg.apply_seed(args.seed, env_seed.as_deref())?;
    if args.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    cfg.validate()?;

    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(a) => commands::eval(&cfg, a.checkpoint.as_deref()),
        Command::CountParams(_) => commands::count_params(&cfg),
        Command::InspectExcitation(a) => {
            commands::inspect_excitation(&cfg, a.checkpoint.as_deref(), a.sample.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
