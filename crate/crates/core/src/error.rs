use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("non-finite value entering {op}")]
    NonFiniteInput { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFiniteOutput { op: &'static str },
    #[error("batch norm in training mode needs more than one value per channel")]
    DegenerateBatch,
    #[error("image resolution {h}x{w} must be at least 32 and divisible by 32")]
    BadResolution { h: usize, w: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("report {sample} has no valid tokens")]
    EmptyReport { sample: usize },
    #[error("pyramid level {level} invalid, expected 1..={levels}")]
    InvalidLevel { level: usize, levels: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NonNormalizedInput { row: usize, norm: f64 },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("malformed file: {0}")]
    BadFormat(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("prompt table has no entry for modality {modality} class {class}")]
    MissingPrompt { modality: usize, class: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
