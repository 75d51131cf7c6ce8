use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("weights must be non-negative with a positive sum")]
    InvalidWeights,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("temperature must be finite and >= 0, got {0}")]
    InvalidTemperature(f64),
    #[error("logits must be finite")]
    NonFiniteLogits,
    #[error("JSD weight must lie strictly inside (0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("no table entry for context {0:?}")]
    MissingContext(Vec<usize>),
    #[error("instance too large for exact enumeration: {0}")]
    TooLarge(String),
    #[error("no traces to aggregate")]
    EmptyTraces,
    #[error("fixed-data fraction is positive but the fixed dataset is empty")]
    MissingData,
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("bound violation: {0}")]
    BoundViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task file missing: {}", .0.display())]
    MissingTask(PathBuf),
    #[error("nothing to report in {}", .0.display())]
    NothingToReport(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
