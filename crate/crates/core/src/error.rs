//! Crate-wide error type. Every fallible public entry point returns
//! [`Result`]; panics are reserved for internal logic errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OwmError {
    /// Shape or axis mismatch in a tensor operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure (non-finite value, singular reduction, ...).
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Malformed input data (dataset, checkpoint contents, CLI input).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed container file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl OwmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        OwmError::Shape { op, detail: detail.into() }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        OwmError::Numeric { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, OwmError>;
