//! Affinity-graph-guided semi-supervised contrastive learning for segmentation.

pub mod affinity;
mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
