//! Command-line front end: configuration, dispatch and result files.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use drainage_core::analytics::AnalyticsError;
use drainage_core::bw::BwError;
use drainage_core::coupling::CouplingError;
use drainage_core::exact::ExactError;
use drainage_core::mc::McError;
use thiserror::Error;

pub use commands::{run, Outcome};
pub use config::RunConfig;
pub use output::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STATISTICAL: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "drainage", version, about = "Simulation and exact verification for the 2D drainage network")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `experiment.master_seed`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides `experiment.workers`. Never changes any output.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "drainage-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Closed-form, enumerated and sampled one-step increment law.
    IncrementCheck,
    /// Survival of the coalescence time and its log-log slope.
    TauTail,
    /// Crowding counts of paths started from a scaled interval.
    Eta,
    /// Rescaled endpoint of one path against the standard normal.
    Marginal,
    /// Lattice pair meeting, simulated Brownian pair and the closed form.
    BwCompare,
    /// Exhaustive check of the monotonicity inequalities and couplings.
    CouplingVerify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::IncrementCheck => "increment-check",
            Command::TauTail => "tau-tail",
            Command::Eta => "eta",
            Command::Marginal => "marginal",
            Command::BwCompare => "bw-compare",
            Command::CouplingVerify => "coupling-verify",
        }
    }

    /// Stem of the command's output files.
    pub fn stem(self) -> &'static str {
        match self {
            Command::IncrementCheck => "increment_check",
            Command::TauTail => "tau_tail",
            Command::Eta => "eta",
            Command::Marginal => "marginal",
            Command::BwCompare => "bw_compare",
            Command::CouplingVerify => "coupling",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Budget(_) => EXIT_BUDGET,
            CliError::Io { .. } | CliError::Other(_) => EXIT_OTHER,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl From<ExactError> for CliError {
    fn from(e: ExactError) -> Self {
        match e {
            ExactError::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
            ExactError::NotAProbability(_) => CliError::config("p", e.to_string()),
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Exact(inner) => inner.into(),
            AnalyticsError::Domain(_) => CliError::config("experiment.p", e.to_string()),
            AnalyticsError::InsufficientHorizons => CliError::config("experiment.horizons", e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::Config { field, reason } => CliError::config(&format!("experiment.{field}"), reason),
            McError::Analytics(inner) => inner.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<BwError> for CliError {
    fn from(e: BwError) -> Self {
        match e {
            BwError::Pool(_) => CliError::Other(e.to_string()),
            other => CliError::config("bw_compare", other.to_string()),
        }
    }
}

impl From<CouplingError> for CliError {
    fn from(e: CouplingError) -> Self {
        match e {
            CouplingError::Exact(inner) => inner.into(),
            CouplingError::GridTooLarge { .. } => CliError::Budget(e.to_string()),
            CouplingError::Pool(_) => CliError::Other(e.to_string()),
            other => CliError::config("coupling_verify", other.to_string()),
        }
    }
}
