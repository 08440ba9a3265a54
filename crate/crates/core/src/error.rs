use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class {0} is absent from every ground-truth mask")]
    AbsentClass(usize),

    #[error("no class is present in the batch")]
    NoPresentClass,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("value {value} outside of [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible phantom geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        /// JSON snapshot of the training state at the point of failure.
        dump: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
