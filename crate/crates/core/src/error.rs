//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("matmul dimension mismatch: lhs {lhs:?} x rhs {rhs:?}")]
    MatmulShape { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} has empty dimension")]
    EmptyDimension { what: &'static str },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input length {len} exceeds max positions {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f32,
        y1: f32,
        x2: f32,
        y2: f32,
        reason: &'static str,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("record {record}: {msg}")]
    Parse { record: usize, msg: String },

    #[error("world generation failed: {0}")]
    WorldGeneration(String),

    #[error("non-finite loss at step {step} in term `{term}`")]
    NonFiniteLoss { step: usize, term: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
