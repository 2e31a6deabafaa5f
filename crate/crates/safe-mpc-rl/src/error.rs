//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("action outside bounds: ({0}, {1}) exceeds max-norm {2}")]
    ActionOutOfBounds(f64, f64, f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("conflicting preset override: {0}")]
    PresetConflict(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("gradient check failed: max relative error {0:.3e} exceeds {1:.3e}")]
    GradientCheck(f64, f64),

    #[error("solver failure rate {0:.2}% exceeds threshold")]
    FailureRate(f64),

    #[error("missing RNN hidden state for RNN variant")]
    MissingRnnState,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
