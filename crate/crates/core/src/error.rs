use thiserror::Error;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: norm {norm:e} is too small to normalize")]
    DegenerateVector { norm: f64 },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::ContractViolation(msg.into())
}
