//! Experiment harness: synthetic redundant video, training, evaluation,
//! ablation sweeps and image/embedding exports.

pub mod ablate;
pub mod config;
pub mod data;
mod error;
pub mod export;
pub mod model;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
