use std::io;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed input data (datasets, vocabularies, pools, fixtures).
    #[error("{0}")]
    Data(String),

    /// Parse failure pinned to a line of a text file.
    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: String,
        line: usize,
        msg: String,
    },

    /// Undecodable input bytes.
    #[error("invalid utf-8 at byte offset {offset}")]
    Utf8 { offset: usize },

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or inconsistent run setup.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or gradient went non-finite during training.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The finite-difference gradient check failed.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for data/config problems, 3 for
    /// numerical failures. Usage errors (exit 1) are handled by the
    /// argument parser before any `Error` exists.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::GradCheck(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
