//! Compact one-step diffusion super-resolution: a lightweight latent
//! encoder/decoder, online annealing pruning of an SD-style U-Net, multi-layer
//! feature distillation, and analytic compute accounting.

pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod distillation;
pub mod error;
pub mod lite_ed;
pub mod nn;
pub mod pipeline;
pub mod pruning;
pub mod sweep;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::{ModelConfig, PocketSr};
