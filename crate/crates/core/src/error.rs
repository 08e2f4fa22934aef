use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NirError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped so that front-ends can map them onto coarse exit
/// categories with [`NirError::category`].
#[derive(Debug, Error)]
pub enum NirError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("rate undefined for group `{group}`: {reason}")]
    UndefinedRate { group: String, reason: String },

    #[error("empty subgroup `{0}`")]
    EmptyGroup(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl NirError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            NirError::Config(_) | NirError::Contract(_) => ErrorCategory::Config,
            NirError::Divergence { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            NirError::NotFound(path)
        } else {
            NirError::Io { path, source }
        }
    }
}
