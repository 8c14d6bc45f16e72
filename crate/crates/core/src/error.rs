//! Error type shared across the toolkit.
//!
//! Variants are grouped by the process exit code they map to, so the CLI can
//! translate any failure into the documented codes: usage/config problems
//! exit 1, data/format problems exit 2, numerical failures exit 3.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad invocation or invalid configuration (exit code 1).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (exit code 2).
    #[error("data error: {0}")]
    Data(String),

    /// IO failure while reading or writing artifacts (exit code 2).
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON that does not parse or does not match the schema (exit code 2).
    #[error("json error in {path}: {message}")]
    Json { path: PathBuf, message: String },

    /// Non-finite values where finite ones are required (exit code 3).
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json { path: path.into(), message: err.to_string() }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Json { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
