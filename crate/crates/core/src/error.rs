//! Error type shared across the pipeline.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or invalid arguments to an operation.
    #[error("validation: {0}")]
    Validation(String),

    /// A text artifact (manifest, trial list, assignment) failed to parse.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A binary artifact is malformed (wrong magic, truncated, bad shape).
    #[error("bad format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A required upstream artifact is missing.
    #[error("missing artifact: {what} (run `{hint}` first)")]
    MissingArtifact { what: String, hint: String },

    /// Numerical failure (non-SPD matrix, divergence, degenerate input).
    #[error("numerical: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Exit code the CLI maps this error to: 1 for validation/parse
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}
