//! `mortmix`: ingest mortality data, fit and select mixed models, forecast,
//! evaluate against benchmarks, build life tables and value annuity books.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mortmix", version, about = "Mixed-effects mortality modelling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "MORTMIX_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed for every simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated populations, as `AUT` or `AUT:F`.
    #[arg(long, global = true)]
    populations: Option<String>,
    /// Forecast horizon in years.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Prediction-interval level.
    #[arg(long, global = true)]
    level: Option<f64>,
    /// Number of simulations.
    #[arg(long, global = true)]
    nsim: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Parse HMD `Mx` files into `panel.csv`.
    Ingest,
    /// Trend covariates, their random walks and forecasts.
    Covariates,
    /// Fit the configured formula on the training years.
    Fit,
    /// Backward selection from the maximal formula.
    Select,
    /// Rate forecasts with prediction intervals, plus benchmarks.
    Forecast,
    /// Test-set errors against the held-out years.
    Evaluate,
    /// Life-expectancy series from observed and forecast rates.
    Lifetable,
    /// Best-estimate liability and solvency capital of a portfolio.
    Value,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        populations: cli.populations.clone(),
        horizon: cli.horizon,
        level: cli.level,
        nsim: cli.nsim,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Covariates => commands::covariates(&cfg),
        Command::Fit => commands::fit(&cfg),
        Command::Select => commands::select(&cfg),
        Command::Forecast => commands::forecast(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Lifetable => commands::lifetable(&cfg),
        Command::Value => commands::value(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
