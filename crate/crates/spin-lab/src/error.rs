//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration of {pairs} (prompt, response) pairs exceeds cap {cap}")]
    EnumerationTooLarge { pairs: u128, cap: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("infinite KL: distribution `b` has zero mass at prompt {prompt}, response {response} where `a` is positive")]
    SupportViolation { prompt: usize, response: usize },

    #[error("non-finite loss at iteration {iteration}, step {step}: {detail}")]
    NonFiniteLoss {
        iteration: usize,
        step: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
