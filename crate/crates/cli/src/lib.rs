//! Experiment runner: dataset generation, active-learning runs, reports.

pub mod config;
pub mod csv_io;
pub mod report;
pub mod run;
pub mod svg;

use dsal_core::active::ActiveError;
use dsal_core::data::DataError;
use thiserror::Error;

pub use config::{ExperimentConfig, ExperimentSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("malformed CSV {path} line {line}: {reason}")]
    Csv { path: String, line: u64, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Csv { .. } => 3,
            Self::Divergence(_) => 4,
            Self::Io { .. } | Self::Other(_) => 5,
        }
    }

    pub(crate) fn io(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.to_string();
        move |source| Self::Io { context, source }
    }
}

impl From<ActiveError> for CliError {
    fn from(e: ActiveError) -> Self {
        if e.is_divergence() {
            Self::Divergence(e.to_string())
        } else {
            Self::Other(e.to_string())
        }
    }
}
