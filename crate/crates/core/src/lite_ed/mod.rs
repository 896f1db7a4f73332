//! Lightweight latent encoder and decoder.

pub mod cross_norm;
pub mod decoder;
pub mod encoder;
pub mod image_io;
pub mod resample;

pub use cross_norm::{cross_normalize, cross_normalize_inject, Injection};
pub use decoder::{LatentDecoder, LiteDecoder, LiteDecoderConfig, SkipInputs};
pub use encoder::{skip_sources, AscMlp, EncoderOutput, LiteEncoder, LiteEncoderConfig, ASC_STAGES};
pub use resample::resize_bicubic;
