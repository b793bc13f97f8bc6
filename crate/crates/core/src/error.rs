use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}: {1}")]
    InvalidShape(Vec<usize>, &'static str),
    #[error("unsupported norm order `{0}` (expected 1, 2 or inf)")]
    UnsupportedNorm(String),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch or dataset")]
    Empty,
    #[error("input dimension {0} too large for brute-force search (max {1})")]
    DimensionTooLarge(usize, usize),
    #[error("training diverged at iteration {0}: objective is not finite")]
    Diverged(usize),
    #[error("every grid candidate diverged")]
    AllCandidatesDiverged,
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("non-numeric cell {value:?} at row {row}, column {column}")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("ragged row {row}: expected {expected} fields, got {got}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset too small: {0} samples (need at least {1})")]
    TooSmall(usize, usize),
    #[error("split has not been assigned")]
    NoSplit,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing {what} `{name}`")]
    Missing { what: &'static str, name: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
