//! Command-line front end for least-loaded expert parallelism.
//!
//! Subcommands:
//!
//! * `plan` prints the assignment for one or more load vectors. Loads come
//!   from `--loads` (comma-separated global counts, `N` inferred from the
//!   length), a `--trace` file, or the configured scenario. With `--out`,
//!   `plan.json` holds an array of plan documents:
//!   `{id, path, imbalance, capacity, force_count, assigned_load,
//!   chunks: [{expert, device, start, end}], transfers: [{expert, src, dst}]}`.
//! * `simulate` runs a step under EP and/or LLEP, checks the outputs against
//!   the dense reference, prices it, and writes `simulate.csv` plus
//!   `manifest.json`.
//! * `sweep` repeats `simulate` over one axis and writes `sweep.csv`.
//! * `verify` runs the randomized exactness, plan and gradient suites.
//! * `gen` writes a scenario's routing as `routing.csv`.
//!
//! Trace files hold one record per line, `id,c_0,c_1,...`, with either `N`
//! global counts or `P*N` per-device counts (device-major). Blank lines and
//! `#` comments are skipped.
//!
//! Exit codes: 0 success, 1 invalid input, 2 exactness or invariant failure.

pub mod config;
pub mod gen;
pub mod manifest;
pub mod plan;
pub mod report;
pub mod simulate;
pub mod sweep;
pub mod verify;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use llep_core::LlepError;

pub use config::{MethodSel, RunArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "llep",
    version,
    about = "Plan, simulate and verify least-loaded expert parallelism"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the expert assignment and weight transfers for given loads.
    Plan(plan::PlanArgs),
    /// Run one step, check it against the dense reference and price it.
    Simulate(simulate::SimulateArgs),
    /// Simulate across values of one parameter.
    Sweep(sweep::SweepArgs),
    /// Randomized exactness, plan-invariant and gradient suites.
    Verify(verify::VerifyArgs),
    /// Write a scenario's routing to a file.
    Gen(gen::GenArgs),
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, files or scenario. Exit code 1.
    Invalid(anyhow::Error),
    /// An exactness or plan-invariant check failed. Exit code 2.
    Failed(anyhow::Error),
}

impl CliError {
    pub fn invalid(e: impl Into<anyhow::Error>) -> Self {
        CliError::Invalid(e.into())
    }

    pub fn failed(e: impl Into<anyhow::Error>) -> Self {
        CliError::Failed(e.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(e) | CliError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<LlepError> for CliError {
    fn from(e: LlepError) -> Self {
        match e {
            LlepError::PlanInconsistent(_) => CliError::failed(e),
            other => CliError::invalid(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::invalid(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::invalid(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::invalid(e)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Plan(a) => plan::cmd_plan(&a),
        Command::Simulate(a) => simulate::cmd_simulate(&a),
        Command::Sweep(a) => sweep::cmd_sweep(&a),
        Command::Verify(a) => verify::cmd_verify(&a),
        Command::Gen(a) => gen::cmd_gen(&a),
    }
}

/// Parses `args` (including the program name), runs, and maps the outcome
/// to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
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
