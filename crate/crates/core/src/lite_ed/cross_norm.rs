use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{Conv2d, ConvSpec, Init};

pub const CROSS_NORM_EPS: f64 = 1e-5;

// Keeps the backward pass finite when a channel is spatially constant.
const VAR_FLOOR: f64 = 1e-12;

fn spatial_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    let std = (var + VAR_FLOOR)?.sqrt()?;
    Ok((mean, std))
}

/// Re-normalizes `injected` to the per-sample, per-channel spatial statistics
/// of `backbone`: `((c − μ_c)/(σ_c + ε))·σ_h + μ_h`.
pub fn cross_normalize(backbone: &Tensor, injected: &Tensor) -> Result<Tensor> {
    if backbone.dims() != injected.dims() {
        return Err(Error::Shape(format!(
            "cross normalization needs matching features, got {:?} and {:?}",
            backbone.dims(),
            injected.dims()
        )));
    }
    let (mu_h, sigma_h) = spatial_stats(backbone)?;
    let (mu_c, sigma_c) = spatial_stats(injected)?;
    let normed = injected
        .broadcast_sub(&mu_c)?
        .broadcast_div(&(sigma_c + CROSS_NORM_EPS)?)?;
    Ok(normed.broadcast_mul(&sigma_h)?.broadcast_add(&mu_h)?)
}

/// `backbone + alpha · cross_normalize(backbone, injected)`; `alpha` is a
/// one-element tensor.
pub fn cross_normalize_inject(backbone: &Tensor, injected: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let normalized = cross_normalize(backbone, injected)?;
    let gate = alpha.reshape((1, 1, 1, 1))?;
    Ok((backbone + normalized.broadcast_mul(&gate)?)?)
}

/// Encoder-feature injection after the U-Net's initial block: 1×1 channel
/// projection, cross normalization, zero-initialized scalar gate.
#[derive(Clone, Debug)]
pub struct Injection {
    pub proj: Conv2d,
    pub alpha: Tensor,
}

impl_params!(Injection { proj, alpha });

impl Injection {
    pub fn new(in_channels: usize, out_channels: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(ConvSpec::new(in_channels, out_channels, 1), init)?,
            alpha: init.constant(&[1], 0.0)?,
        })
    }

    pub fn forward(&self, backbone: &Tensor, feature: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = backbone.dims4()?;
        let (fn_, fc, fh, fw) = feature.dims4()?;
        if (fn_, fh, fw) != (n, h, w) || fc != self.proj.in_channels() {
            return Err(Error::Shape(format!(
                "injected feature {:?} does not match initial-block output {:?} with {} injection channels",
                feature.dims(),
                backbone.dims(),
                self.proj.in_channels()
            )));
        }
        cross_normalize_inject(backbone, &self.proj.forward(feature)?, &self.alpha)
    }
}
