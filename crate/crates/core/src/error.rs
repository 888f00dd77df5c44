//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("schedule singular at t={t}: score coefficient {coeff:e} below 1e-12")]
    SingularSchedule { t: f64, coeff: f64 },

    #[error("unsupported reward kind `{kind}` for {op}")]
    UnsupportedReward { op: &'static str, kind: &'static str },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty sample set")]
    EmptySamples,

    #[error("tilt normalization diverged")]
    DivergentTilt,

    #[error("trajectory escaped the integration domain at t={t}")]
    Diverged { t: f64 },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("all {attempted} rollout attempts rejected")]
    AllTrajectoriesRejected { attempted: usize },

    #[error("histogram edges must be strictly increasing")]
    NonMonotoneEdges,

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("checkpoint line {line}: {why}")]
    Checkpoint { line: usize, why: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid { what, why: why.into() }
    }
}
