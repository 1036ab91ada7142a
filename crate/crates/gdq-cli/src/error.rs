//! Process-level error classification. Every failure a command can produce
//! collapses into one of three classes, each with its own exit code, so
//! shell scripts can distinguish "you called it wrong" from "your inputs
//! were bad" from "the disk misbehaved".

use gdq_core::{FormatError, ModelError, QuantizeError, RestoreError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Contradictory or missing command-line arguments. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// A config, input artifact, or check failed validation. Exit code 2.
    #[error("{0}")]
    Validation(String),
    /// Reading or writing a file failed. Exit code 3.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

/// Model files: missing/unreadable is an I/O problem, undecodable content a
/// validation problem.
impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::Io { .. } => CliError::Io(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<QuantizeError> for CliError {
    fn from(err: QuantizeError) -> Self {
        match err {
            QuantizeError::Io { .. } => CliError::Io(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<RestoreError> for CliError {
    fn from(err: RestoreError) -> Self {
        match err {
            RestoreError::Io { .. } => CliError::Io(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(err: FormatError) -> Self {
        match err {
            FormatError::Io { .. } => CliError::Io(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}
