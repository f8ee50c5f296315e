use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {len} rows at ({row}, {col})")]
    Index {
        row: usize,
        col: usize,
        index: usize,
        len: usize,
    },
    #[error("{0} requires a weight tensor")]
    MissingWeights(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value entering {0}")]
    NonFinite(&'static str),
    #[error("{0} needs at least one row")]
    EmptyBatch(&'static str),
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("checkpoint lacks entry {0:?}")]
    MissingEntry(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
