use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value produced in stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("optimization diverged at iteration {iteration}: loss {loss} exceeds {limit}")]
    Diverged {
        iteration: usize,
        loss: f64,
        limit: f64,
        /// Trace up to and including the diverging iteration.
        trace: crate::optimization::LossTrace,
    },

    #[error("ray through pixel ({x}, {y}) of frame {frame} escapes the scene")]
    RayEscaped { frame: usize, x: usize, y: usize },

    #[error("insufficient frames: need {required} frames around the target, got {available}")]
    InsufficientFrames { required: usize, available: usize },

    #[error("sight masks {first} and {second} overlap at pixel ({x}, {y})")]
    MaskOverlap {
        first: usize,
        second: usize,
        y: usize,
        x: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
