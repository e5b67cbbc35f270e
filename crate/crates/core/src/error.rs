use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite field output at solver step {step}")]
    SolverDiverged { step: usize },

    #[error("unsupported input rate {rate} Hz (supported: {supported:?})")]
    UnsupportedRate { rate: u32, supported: Vec<u32> },

    #[error("spectrogram is compressed (alpha = {0}); expand it first")]
    Compressed(f64),

    #[error("spectrogram state: {0}")]
    SpectrogramState(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("NaN loss at step {step} (lr = {lr})")]
    NanLoss { step: usize, lr: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::SolverDiverged { .. } | Error::NanLoss { .. }
        )
    }
}
