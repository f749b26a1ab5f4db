use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use regtps::error::Result;
use regtps::io::{run_report, run_scenarios, run_simulate, run_station_analysis, RunConfig};

#[derive(Parser)]
#[command(name = "regtps", version, about = "Spatial field benchmarking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured scenarios and write the data files.
    Simulate(CommonOpts),
    /// Fit both models to every scenario and write all artifacts.
    Fit {
        #[command(flatten)]
        common: CommonOpts,
        /// Run scenarios in parallel (chains are always parallel).
        #[arg(long)]
        parallel: bool,
    },
    /// Ingest station data and run the comparison analysis.
    Stations(CommonOpts),
    /// Write non-sampling diagnostics: spectrum and covariance curves.
    Report(CommonOpts),
}

fn load(common: &CommonOpts) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => run_simulate(&load(&common)?),
        Command::Fit { common, parallel } => {
            run_scenarios(&load(&common)?, parallel).map(|_| ())
        }
        Command::Stations(common) => run_station_analysis(&load(&common)?),
        Command::Report(common) => run_report(&load(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
