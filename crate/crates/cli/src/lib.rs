//! Command-line front end: configuration, CSV ingest and the subcommands
//! `simulate`, `fit`, `erm`, `diagnose` and `validate`.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use driftlab_core::dlm::FitMode;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "driftlab", version, about = "Dataset weighting and inference under random distributional shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Realize a perturbed world and write one CSV per dataset plus world.json.
    Simulate(SimulateArgs),
    /// Estimate dataset weights and report the distributional linear model.
    Fit(FitArgs),
    /// Weighted risk minimization with intervals and out-of-distribution risk.
    Erm(ErmArgs),
    /// Tidy diagnostic data behind residual, QQ and scatter plots.
    Diagnose(DiagnoseArgs),
    /// Run the Monte Carlo validation checks.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Source CSV files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Whiten the test functions by the pooled covariance.
    #[arg(long)]
    pub whiten: bool,
    /// Report path; `.txt` gives the text summary, `.json` the full report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Simplex,
    SumToOne,
}

impl From<ModeArg> for FitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simplex => FitMode::Simplex,
            ModeArg::SumToOne => FitMode::SumToOne,
        }
    }
}

#[derive(Debug, Args)]
pub struct ErmArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `squared` or `logistic`.
    #[arg(long)]
    pub loss: Option<String>,
    /// `dlm`, `uniform`, `importance` or `file:<path>`.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// JSON report written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Target file; the one recorded in the report when omitted.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Runs every check at its defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `argv` (program name first), run, and return the exit code:
/// 0 on success, 1 on user error, 2 when validation checks fail.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if cli.quiet {
        log::set_max_level(log::LevelFilter::Error);
    } else if cli.verbose > 0 {
        log::set_max_level(if cli.verbose == 1 { log::LevelFilter::Debug } else { log::LevelFilter::Trace });
    }
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
