//! Finetuning and evaluation toolkit for in-the-wild deepfake image
//! detection: standard pretrained vision backbones with a dropout + linear
//! head, learning-rate schedules with early stopping, threshold-free
//! evaluation, gradient-based heatmaps, and deployment-cost profiling.

pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod profile;
pub mod report;
pub mod schedule;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
