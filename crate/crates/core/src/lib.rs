//! Semi-supervised segmentation with reconstruction-based error reflection
//! and multi-scale puzzle mixing, built on a mean-teacher pair of U-Nets.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod puzzle;
pub mod reflection;
pub mod sketch;
pub mod trainer;
pub mod types;

pub use config::{validate_config, LossWeights, TrainConfig};
pub use error::{Error, Result};
pub use types::{BinaryMask, Image, LabelMask, ProbMap};
