use std::io;

use crate::tensor::DType;

/// Errors raised by tensor, layer, model and accounting operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DType { expected: DType, found: DType },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("precondition violated: {what} (measured {measured:e}, allowed {allowed:e})")]
    Precondition { what: String, measured: f64, allowed: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

pub(crate) use shape_err;
