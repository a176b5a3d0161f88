use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::OpKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op:?}: {shapes:?}")]
    ShapeMismatch { op: OpKind, shapes: Vec<Vec<usize>> },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("no gradient for parameters: {}", .0.join(", "))]
    MissingGradient(Vec<String>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum EventError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("message count must be at least 1")]
    ZeroCount,
    #[error("item universe is empty")]
    NoItems,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("negative time difference {0}")]
    NegativeDelta(f64),
    #[error("message born at {birth} is newer than reference time {reference}")]
    BirthAfterReference { birth: f64, reference: f64 },
    #[error("target time {target} precedes last interaction {last}")]
    TargetBeforeLast { target: f64, last: f64 },
    #[error("every message of the set is masked")]
    AllMasked,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC needs at least one positive and one negative")]
    SingleClass,
    #[error("average precision needs at least one positive")]
    NoPositives,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became NaN at batch {batch}")]
    Diverged { batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("no candidate users or items to score")]
    EmptyCandidates,
    #[error("invalid window configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
