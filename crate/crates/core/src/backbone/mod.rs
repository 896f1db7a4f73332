//! One-step diffusion U-Net in the SD-2 layout.

pub mod blocks;
pub mod config;
pub mod unet;

pub use config::{Depth, DepthEntry, DepthMap, ModuleKind, Position, UNetConfig, FIXED_TIMESTEP};
pub use unet::{build_unet, UNetFeatures, UNetModel, STAGE_NAMES};
