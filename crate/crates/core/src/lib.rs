//! Unsupervised cross-domain motion retargeting through a joint keypoint
//! bottleneck.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod keypoints;
pub mod losses;
pub mod media_io;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod synthetic;
pub mod trainer;
pub mod warp;

pub use error::{JokrError, Result};
