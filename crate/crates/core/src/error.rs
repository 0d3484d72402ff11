use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: String },

    #[error("{path}: unsupported raster ({detail})")]
    UnsupportedRaster { path: PathBuf, detail: String },

    #[error("label pixel ({x}, {y}) has color {rgb:?} outside the label color table")]
    UnknownLabelColor { x: usize, y: usize, rgb: [u8; 3] },

    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("image {width}x{height} is smaller than patch size {patch}")]
    ImageTooSmall { height: usize, width: usize, patch: usize },

    #[error("config hash mismatch: checkpoint {checkpoint}, runtime {runtime}")]
    ConfigMismatch { checkpoint: String, runtime: String },

    #[error("non-finite loss {loss} at iteration {iteration} (batch images {batch:?})")]
    NonFiniteLoss { iteration: usize, loss: f64, batch: Vec<(usize, usize, usize)> },

    #[error("empty evaluation set: {0}")]
    EmptyEvaluation(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::UnsupportedRaster { .. } => "unsupported_raster",
            Error::UnknownLabelColor { .. } => "unknown_label_color",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Shape(_) => "shape",
            Error::InvalidParam(_) => "invalid_param",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::EmptyEvaluation(_) => "empty_evaluation",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: impl ToString) -> Self {
        Error::Io { path: path.into(), cause: cause.to_string() }
    }
}
