//! Crate-wide error type. Library code never panics on bad user input;
//! everything that can fail returns [`Result`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("backward already ran on this tape")]
    DoubleBackward,

    #[error("backward called on a tape created with gradients disabled")]
    GradDisabled,

    #[error("non-finite input: {what}")]
    NonFiniteInput { what: String },

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("non-finite gradient while computing {what}")]
    NonFiniteGradient { what: String },

    #[error("direction vector for {what} has zero norm")]
    ZeroVector { what: &'static str },

    #[error("quantization plan does not match model: {detail}")]
    PlanMismatch { detail: String },

    #[error("iteration {iter} outside budget of {total}")]
    IterOutOfRange { iter: usize, total: usize },

    #[error("checkpoint mismatch: {detail}")]
    CheckpointMismatch { detail: String },

    #[error("dataset missing at {path}")]
    DatasetMissing { path: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{what} index {index} out of range (size {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid config at {pointer}: {message}")]
    InvalidConfig { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// JSON-pointer of the offending config field, when this is a config error.
    pub fn pointer(&self) -> Option<&str> {
        match self {
            Error::InvalidConfig { pointer, .. } => Some(pointer),
            _ => None,
        }
    }
}
