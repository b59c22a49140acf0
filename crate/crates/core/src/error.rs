use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("layer {layer}: {reason}")]
    LayerChain { layer: usize, reason: String },

    #[error("label index {index} out of range for alphabet of size {alphabet_size}")]
    LabelIndex { index: usize, alphabet_size: usize },

    #[error("character {ch:?} is not in the alphabet")]
    UnknownChar { ch: char },

    #[error("line {line}: sample {id}: label character {ch:?} has no index in the alphabet")]
    LabelOutOfAlphabet { id: String, line: usize, ch: char },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("sample {id}: image file {path} not found")]
    MissingImage { id: String, path: PathBuf },

    #[error("instance too large for exhaustive enumeration ({0} sequences)")]
    TooLarge(u128),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stale or missing activation cache: {0}")]
    StaleCache(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
