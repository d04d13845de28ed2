use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("validation failed for {subject}: {reason}")]
    Validation { subject: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no ground-truth target: {0}")]
    NoTarget(String),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("training diverged at step {step}, epoch {epoch}: {loss} = {value}")]
    Divergence {
        step: u8,
        epoch: usize,
        loss: String,
        value: f64,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn validation(subject: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            subject: subject.into(),
            reason: reason.into(),
        }
    }
}
