use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("matrix contains a non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("selection is empty: every candidate is masked")]
    EmptySelection,

    #[error("synthesis needs at least two parents, got {0}")]
    InsufficientParents(usize),

    #[error("class probability tau must lie in [0, 1), got {0}")]
    InvalidTau(f64),

    #[error("loss node must be scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset has {n} samples but a batch needs {batch}")]
    DatasetTooSmall { n: usize, batch: usize },

    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("labels contain a single class; a classifier needs at least two")]
    DegenerateLabels,

    #[error("model has no projection head")]
    MissingHead,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: file size {size} is not a multiple of {record} bytes")]
    BadFileSize {
        path: PathBuf,
        size: u64,
        record: usize,
    },

    #[error("{path}: record {record} has label byte {label} (expected 0-9)")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig(detail.into())
    }
}
