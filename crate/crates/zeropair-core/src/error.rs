//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps each variant
//! class onto a distinct process exit code.

use thiserror::Error;

/// Errors produced by tensors, networks, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or axes disagree. `detail` names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or configuration value is out of range.
    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// An API contract was violated (e.g. non-scalar objective).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An encoder/decoder pair cannot be composed.
    #[error("composition error: {0}")]
    Composition(String),

    /// The zero-pair evaluation protocol would be broken.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Numeric failure during training (NaN/Inf loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file has an unexpected or corrupt layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn parameter(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Exit-code category for the CLI: each error class gets its own code.
    pub fn category_code(&self) -> i32 {
        match self {
            Error::Parameter { .. } => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Dimension { .. } => 4,
            Error::Protocol(_) => 5,
            Error::Composition(_) => 6,
            Error::Numeric(_) => 7,
            Error::Contract { .. } => 8,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
