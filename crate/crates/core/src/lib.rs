//! Supertoken video transformers: the semantic pooling module, single-scale
//! and multi-scale models built around it, and an analytical FLOP model.

pub mod config;
mod error;
pub mod flops;
pub mod grid;
pub mod layers;
pub mod mvit;
pub mod params;
pub mod presets;
pub mod spm;
pub mod vit;

pub use config::{MViTConfig, ModelConfig, SpmConfig, ViTConfig, Window};
pub use error::{CoreError, Result};
pub use grid::{Grid, WindowPartition};
pub use params::{Bound, ParamSet, ParamSpec};
