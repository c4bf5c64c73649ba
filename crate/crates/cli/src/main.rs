//! `amaa`: dataset generation, training, evaluation and the desk-scale
//! experiments from the command line.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, missing files),
//! 2 runtime failure. Diagnostics go to stderr; stdout carries one summary
//! line per command. Nothing is written outside `--out`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use amaa_core::config::RunConfig;
use amaa_core::AmaaError;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<AmaaError> for CliError {
    fn from(e: AmaaError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "amaa", version, about = "Monocular semantic scene completion at desk scale")]
pub struct Cli {
    /// TOML run configuration, or `default` for the built-in one.
    #[arg(long, global = true, default_value = "default")]
    pub config: PathBuf,

    /// Overrides the seed the subcommand uses (see each subcommand).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; every artifact is written below it.
    #[arg(long, global = true, env = "AMAA_OUT", default_value = "amaa-out")]
    pub out: PathBuf,

    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    pub print_default_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to `<out>/data`. `--seed` sets the dataset seed.
    GenScenes,
    /// Train one model. `--seed` sets the initialization and data-order seed.
    Train {
        /// Dataset manifest; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a parameter file on a dataset split.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: commands::Split,
    },
    /// Train variants A-D over the configured seeds. `--seed` runs a single seed.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One gated-fusion run per configured alpha. `--seed` sets the run seed.
    SweepAlpha {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable module.
    Gradcheck {
        /// Number of random seeds, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write plot-ready CSV files from a finished train or ablate run into `<out>/plots`.
    ExportPlots {
        /// Directory of the finished run; defaults to `--out`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    RunConfig::load(&cli.config).map_err(|e| match e {
        AmaaError::Io { path, source } => {
            CliError::Validation(format!("cannot read config {}: {source}", path.display()))
        }
        other => CliError::Validation(other.to_string()),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_default_config {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Validation("no subcommand given; see `amaa --help`".into()));
    };
    let cfg = load_config(&cli)?;
    commands::dispatch(command, &cfg, cli.seed, &cli.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
