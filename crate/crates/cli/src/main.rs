use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use buddies_cli::config::ExperimentConfig;
use buddies_cli::{experiment, report};

/// Batch experiment runner for the buddies anonymity simulator.
#[derive(Parser)]
#[command(name = "buddies", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ideal-anonymity analyses of a trace (no protocol simulation).
    Ideal { config: PathBuf },
    /// Simulate selected nyms under each configured policy, with metric
    /// and attack evaluation.
    Simulate { config: PathBuf },
    /// Fold an output directory into CDFs and a summary table.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ideal { config } => {
            ExperimentConfig::load(&config).and_then(|cfg| experiment::cmd_ideal(&cfg))
        }
        Command::Simulate { config } => {
            ExperimentConfig::load(&config).and_then(|cfg| experiment::cmd_simulate(&cfg))
        }
        Command::Report { dir } => report::cmd_report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
