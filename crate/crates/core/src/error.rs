//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by pipeline operations, model code, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A required artifact or field is absent.
    #[error("missing data: {0}")]
    MissingData(String),

    /// A file exists but its contents cannot be decoded.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training aborted because the loss became non-finite.
    #[error("non-finite loss at step {step} (batch {batch_id}); diagnostics at {dump}")]
    NonFiniteLoss {
        step: usize,
        batch_id: String,
        dump: PathBuf,
    },

    /// A statistic cannot be computed on degenerate input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An audited access rule was violated (e.g. a split read outside its phase).
    #[error("access violation: {0}")]
    AccessViolation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingData(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) => 2,
            Error::MissingData(_) => 3,
            Error::Format { .. } => 4,
            Error::NonFiniteLoss { .. } => 5,
            Error::Degenerate(_) => 6,
            Error::AccessViolation(_) => 7,
            Error::Io { .. } => 8,
        }
    }
}
