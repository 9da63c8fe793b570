use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use heatstab_cli::{run, write_outputs, ConfigError, ExperimentKind, RunConfig, RunError};

#[derive(Parser)]
#[command(
    name = "heatstab",
    version,
    about = "Feedback stabilization experiments for the controlled heat equation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Paths {
    /// TOML config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the spectral-inequality constant
    Spectral(Paths),
    /// Stationary rapid-stabilization run
    Rapid(Paths),
    /// Piecewise null control on [0, T]
    Null(Paths),
    /// T-periodic finite-time stabilizer
    Finite(Paths),
    /// Null-control cost over a horizon grid
    Sweep(Paths),
}

fn execute(kind: ExperimentKind, paths: &Paths) -> Result<(), RunError> {
    let text = fs::read_to_string(&paths.config).map_err(|e| ConfigError {
        key: "<file>".into(),
        message: format!("cannot read {}: {e}", paths.config.display()),
    })?;
    let config = RunConfig::parse(&text, Some(kind))?;
    let outcome = run(&config)?;
    write_outputs(&outcome, &paths.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, paths) = match &cli.command {
        Command::Spectral(p) => (ExperimentKind::Spectral, p),
        Command::Rapid(p) => (ExperimentKind::Rapid, p),
        Command::Null(p) => (ExperimentKind::Null, p),
        Command::Finite(p) => (ExperimentKind::Finite, p),
        Command::Sweep(p) => (ExperimentKind::Sweep, p),
    };
    match execute(kind, paths) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("heatstab {kind}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
