//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by dataset loading, model training, sampling and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem-level failure, with the path that triggered it.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record on disk could not be decoded; names the offending file.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// A precondition on runtime values was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor had an unexpected shape.
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Non-finite values or a numerically undefined operation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A training run failed; carries diagnostics such as loss curves.
    #[error("training error: {message}")]
    Training { message: String, diagnostics: Vec<String> },

    /// A statistic is undefined for the given input (e.g. constant vectors).
    #[error("degenerate statistic: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { expected: expected.into(), got: got.into() }
    }

    pub fn training(message: impl Into<String>) -> Self {
        Error::Training { message: message.into(), diagnostics: Vec::new() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
