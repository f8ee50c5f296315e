use std::path::PathBuf;

use egflow_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{what}: need at least {need}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },

    #[error("{what}: {a} vs {b}")]
    LengthMismatch { what: &'static str, a: usize, b: usize },

    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),

    #[error("index {index} out of range for {len} points")]
    OutOfRange { index: usize, len: usize },

    #[error("degenerate alignment support, singular values {0:?}")]
    Degenerate([f64; 3]),

    #[error("feature-space search is only valid at the coarsest scale, got scale {scale}")]
    SearchMode { scale: usize },

    #[error("weights must be non-negative with a positive sum")]
    BadWeights,

    #[error("invalid rigid transform: {0}")]
    BadTransform(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
