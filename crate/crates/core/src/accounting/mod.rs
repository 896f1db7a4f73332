//! Analytic parameter and MAC counting, latency measurement and compression reports.

pub mod arch;
pub mod report;

pub use arch::{describe, describe_decoder, describe_encoder, describe_unet, module_kind, Architecture, BlockSpec, LayerSpec, Op};
pub use report::{
    compression_report, compute_report, cross_check, hardware_descriptor, measure_latency, model_block_params,
    write_jsonl, ComputeReport, ComputeRow, CompressionReport, Reduction, Totals,
};

use candle_core::Tensor;

use crate::error::Result;
use crate::pipeline::PocketSr;

/// Median forward latency of `model` on a zero input of `input` HR pixels.
pub fn measure_model_latency(model: &PocketSr, input: (usize, usize), trials: usize, warmup: usize) -> Result<f64> {
    let model = model.detached();
    let x = Tensor::zeros((1, 3, input.0, input.1), model.dtype(), model.device())?;
    measure_latency(trials, warmup, || model.forward(&x).map(|_| ()))
}
