use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural problem with shapes, hyperparameters or configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Data that violates an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// An API called out of order (step before backward, missing snapshot, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A rate whose denominator is zero.
    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    /// A statistical test without enough informative observations.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Usage(_) => "usage",
            Error::UndefinedRate(_) => "undefined_rate",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
