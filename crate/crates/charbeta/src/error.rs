//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration or dimension mismatch supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (CSV panels, NaNs, schema violations).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical operation failed (singular matrix, failed factorization).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// I/O failure while reading or writing panels and reports.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV parse failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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

    /// Process exit code convention: 2 for configuration errors, 3 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Csv(_) | Error::Io(_) => 3,
            Error::Numerical(_) | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
