use std::io;

use thiserror::Error;

/// Errors produced anywhere in the shading toolkit.
#[derive(Debug, Error)]
pub enum ReliefError {
    #[error("line {line}, token {token}: {message}")]
    Parse {
        line: usize,
        token: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported image: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no near-flat cells found (threshold {threshold_deg} degrees); supply the flat tone explicitly")]
    NoFlatCells { threshold_deg: f64 },

    #[error("memory budget exceeded: whole-image pass needs about {required} bytes, budget is {budget} bytes")]
    MemoryBudget { required: u64, budget: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ReliefError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ReliefError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        ReliefError::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        ReliefError::Format(msg.into())
    }
}

pub type Result<T, E = ReliefError> = std::result::Result<T, E>;
