mod commands;
mod configs;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    CoordCheck,
    LrSweep,
    Tune,
    GramCheck,
    CrossLayerCheck,
    RouterCollapse,
    EmitConfig,
    Selftest,
}

/// Width-scaling experiments for a single mixture-of-experts block.
#[derive(Debug, Parser)]
#[command(name = "moe-scaling", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON config for the command (optional for `selftest`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Upper bound on concurrently trained cells.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

/// Why a command stopped without producing a full report.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation, config or filesystem problem (exit 2).
    Setup(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Context { config: cli.config, out: cli.out, jobs: cli.jobs as usize, seed_offset: cli.seed_offset };
    let result = match cli.command {
        Command::CoordCheck => commands::coord_check(&ctx),
        Command::LrSweep => commands::lr_sweep(&ctx),
        Command::Tune => commands::tune(&ctx),
        Command::GramCheck => commands::gram_check(&ctx),
        Command::CrossLayerCheck => commands::cross_layer_check(&ctx),
        Command::RouterCollapse => commands::router_collapse(&ctx),
        Command::EmitConfig => commands::emit_config(&ctx),
        Command::Selftest => commands::selftest(&ctx),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Setup(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
