use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum JokrError {
    #[error("no input frames found at {0}")]
    MissingInput(PathBuf),
    #[error("video {video} has {frames} frame(s); at least 2 are required")]
    TooShort { video: String, frames: usize },
    #[error("mask shape {got:?} does not match frame shape {expected:?}")]
    MaskMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("mask provider failed on frame {index}: {message}")]
    ProviderFailure { index: usize, message: String },
    #[error("heatmap channel {channel} sums to {sum}, expected 1")]
    NotNormalized { channel: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("affine transform is singular (det = {0})")]
    SingularTransform(f64),
    #[error("keypoint index {index} out of range for K = {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("coordinate {0} lies outside [-1, 1]")]
    CoordinateOutOfRange(f64),
    #[error("sequence lengths differ: {0}")]
    LengthMismatch(String),
    #[error("invalid checkpoint: {0}")]
    CheckpointInvalid(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: {term} = {value}")]
    DivergenceDetected {
        iteration: u64,
        term: String,
        value: f64,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, JokrError>;
