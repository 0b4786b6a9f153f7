//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, out-of-range hyperparameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion or sampling problems.
    #[error("data error: {0}")]
    Data(String),

    /// Quality predictor asked for eval-mode output before any running
    /// batch-norm statistics were accumulated.
    #[error("uncalibrated predictor: no running statistics recorded yet; train or calibrate first")]
    UncalibratedPredictor,

    /// Training produced a non-finite loss; the breakdown captures the state
    /// at the failing step.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// Checkpoint or feature-dump container malformed / version mismatch.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
