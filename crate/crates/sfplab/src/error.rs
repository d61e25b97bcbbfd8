//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or tensor shapes; names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numerically degenerate input (zero-norm embedding, fully masked
    /// row, all-identical space, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed or out-of-range input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// API misuse (wrong mode, node from another tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed line in a structured text file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for usage/input problems, 3 for numeric or
    /// degenerate-math failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Degenerate(_) | Error::Shape(_) => 3,
            _ => 2,
        }
    }
}
