use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters, presets, splits or CLI input.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition (shapes, value ranges, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss, training aborted: {0}")]
    Diverged(Box<Divergence>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Ingestion { path: path.into(), reason: reason.to_string() }
    }
}

/// State captured when a training step produces a non-finite loss.
#[derive(Debug, Clone, Serialize)]
pub struct Divergence {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub consistency_weight: f64,
    pub seg_loss: f64,
    pub cons_loss: f64,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:e} w={} seg={} cons={}",
            self.step, self.epoch, self.lr, self.consistency_weight, self.seg_loss, self.cons_loss
        )
    }
}
