//! Data loading, synthetic data, checkpoints, configuration and the command
//! line around `transhnet-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod error;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
