//! Weakly-supervised incremental semantic segmentation from image-level labels.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grid;
pub mod image;
pub mod loc_prior;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pamr;
pub mod pooling;
pub mod pseudo;
pub mod synth;
pub mod taxonomy;
pub mod train_log;
pub mod trainer;

pub use error::{Error, Result};
