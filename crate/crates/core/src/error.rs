use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("inconsistent dimension: expected {expected}, found {found} (row {row})")]
    DimensionInconsistency {
        expected: usize,
        found: usize,
        row: usize,
    },

    #[error("anchor row {0} has zero norm")]
    ZeroRow(usize),

    #[error("classes missing from data: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("degenerate class set: at least two classes are required")]
    DegenerateClasses,

    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid k: {0}")]
    InvalidK(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
