//! Command-line front end. Parses flags, loads the scenario config, sizes
//! the worker pool, and maps failures onto the documented exit codes:
//! 0 ok, 2 config-invalid, 3 missing-dependency, 4 io-error.

mod commands;
mod io;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Invocation;
use scenario::{load_config, CliError};

#[derive(Parser)]
#[command(
    name = "ppsim",
    version,
    about = "Mesoscopic grid-traffic simulator with auction-based priority control"
)]
struct Cli {
    /// Scenario config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on parallel run evaluations.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory, overriding the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario across its seeds and write trip/efficiency/signal files.
    Simulate,
    /// Evaluate a parameter grid and write sweep.csv.
    Sweep,
    /// Select optimal parameters from a finished sweep.
    Optimize,
    /// Synthesize a population and clear the entitlement market once.
    Market,
    /// Extrapolate hourly benefits to daily city-scale totals.
    City,
    /// Run the inflow ramp and emit fundamental-diagram samples and fits.
    Fundamental,
    /// Dump the constructed network as JSON.
    Network,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::ConfigInvalid("--jobs must be at least 1".into()));
        }
        // Ignore the error when a pool already exists (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let config_path = cli
        .config
        .ok_or_else(|| CliError::ConfigInvalid("--config PATH is required".into()))?;
    let (config, config_bytes) = load_config(&config_path)?;
    let inv = Invocation { config, config_bytes, out: cli.out, seed_override: cli.seed_override };
    match cli.command {
        Cmd::Simulate => commands::cmd_simulate(&inv),
        Cmd::Sweep => commands::cmd_sweep(&inv),
        Cmd::Optimize => commands::cmd_optimize(&inv),
        Cmd::Market => commands::cmd_market(&inv),
        Cmd::City => commands::cmd_city(&inv),
        Cmd::Fundamental => commands::cmd_fundamental(&inv),
        Cmd::Network => commands::cmd_network(&inv),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
