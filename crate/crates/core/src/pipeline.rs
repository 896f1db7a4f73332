//! Full super-resolution model: lite encoder → one-step U-Net → lite decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_unet, UNetConfig, UNetFeatures, UNetModel};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::lite_ed::{
    resize_bicubic, LatentDecoder, LiteDecoder, LiteDecoderConfig, LiteEncoder, LiteEncoderConfig, SkipInputs,
};
use crate::nn::{self, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scale: usize,
    pub use_asc: bool,
    pub use_dfi: bool,
    pub unet: UNetConfig,
    pub encoder: LiteEncoderConfig,
    pub decoder: LiteDecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        let encoder = LiteEncoderConfig::toy();
        let mut unet = UNetConfig::toy();
        unet.injection_channels = encoder.dfi_channels;
        Self {
            scale: 4,
            use_asc: true,
            use_dfi: true,
            unet,
            encoder,
            decoder: LiteDecoderConfig::toy(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            scale: 4,
            use_asc: true,
            use_dfi: true,
            unet: UNetConfig::full_scale(),
            encoder: LiteEncoderConfig::full_scale(),
            decoder: LiteDecoderConfig::full_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.scale == 0 {
            return Err(Error::Config("model.scale must be positive".into()));
        }
        if self.encoder.latent_channels != self.unet.latent_channels
            || self.decoder.latent_channels != self.unet.latent_channels
        {
            return Err(Error::Config("encoder, U-Net and decoder latent widths differ".into()));
        }
        if self.use_dfi && self.unet.injection_channels != self.encoder.dfi_channels {
            return Err(Error::Config(format!(
                "model.unet.injection_channels ({}) must equal model.encoder.dfi_channels ({})",
                self.unet.injection_channels, self.encoder.dfi_channels
            )));
        }
        Ok(())
    }
}

/// Image side lengths the full model accepts: 8× into the latent, then three
/// 2× downsamples in the U-Net.
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Clone)]
pub struct PocketSr {
    pub config: ModelConfig,
    pub encoder: LiteEncoder,
    pub unet: UNetModel,
    pub decoder: LiteDecoder,
}

impl_params!(PocketSr { encoder, unet, decoder });

pub struct Prediction {
    pub image: Tensor,
    pub features: UNetFeatures,
}

impl PocketSr {
    pub fn new(config: &ModelConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: LiteEncoder::new(&config.encoder, init)?,
            unet: build_unet(&config.unet, init)?,
            decoder: LiteDecoder::new(&config.decoder, init)?,
        })
    }

    pub fn device(&self) -> &Device {
        self.unet.device()
    }

    pub fn dtype(&self) -> DType {
        self.unet.dtype()
    }

    /// Map an LR image already upsampled to the target size to the SR image.
    pub fn forward(&self, upsampled: &Tensor) -> Result<Tensor> {
        Ok(self.predict(upsampled)?.image)
    }

    pub fn predict(&self, upsampled: &Tensor) -> Result<Prediction> {
        let enc = self.encoder.encode(upsampled)?;
        let injected = self.config.use_dfi.then_some(&enc.dfi_feature);
        let features = self.unet.forward_features(&enc.latent, injected)?;
        let image = if self.config.use_asc {
            let kappa = self.encoder.asc_coefficients(&enc.asc_input)?;
            let skips = SkipInputs {
                sources: &enc.skip_sources,
                kappa: &kappa,
            };
            self.decoder.decode(features.output(), Some(&skips))?
        } else {
            self.decoder.decode(features.output(), None)?
        };
        Ok(Prediction { image, features })
    }

    /// Bicubic upsampling of an LR batch to the model scale.
    pub fn upsample_input(&self, lr: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = lr.dims4()?;
        let s = self.config.scale;
        resize_bicubic(lr, h * s, w * s, false)
    }

    /// Super-resolve a single LR image `[1, 3, h, w]` of any size. The
    /// upsampled input is reflect-padded to a multiple of [`INPUT_MULTIPLE`]
    /// and, if larger than `tile` on either side, processed in overlapping
    /// tiles.
    pub fn super_resolve(&self, lr: &Tensor, tile: usize, overlap: usize) -> Result<Tensor> {
        self.detached().resolve(&lr.detach(), tile, overlap)
    }

    /// A copy sharing storage whose parameters are plain tensors, so forward
    /// passes record no autograd history and free intermediates as they go.
    pub fn detached(&self) -> PocketSr {
        let mut m = self.clone();
        nn::freeze(&mut m);
        m
    }

    fn resolve(&self, lr: &Tensor, tile: usize, overlap: usize) -> Result<Tensor> {
        let up = self.upsample_input(lr)?;
        let (_, _, h, w) = up.dims4()?;
        if h <= tile && w <= tile {
            let padded = reflect_pad_to_multiple(&up, INPUT_MULTIPLE)?;
            let out = self.forward(&padded)?;
            return Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?);
        }
        self.tiled(&up, tile, overlap)
    }

    fn tiled(&self, up: &Tensor, tile: usize, overlap: usize) -> Result<Tensor> {
        if tile % 8 != 0 || overlap >= tile {
            return Err(Error::InvalidArgument(format!(
                "tile {tile} must be a multiple of 8 larger than the overlap {overlap}"
            )));
        }
        let (_, c, h, w) = up.dims4()?;
        let ys = tile_starts(h, tile, overlap);
        let xs = tile_starts(w, tile, overlap);
        let mut acc = vec![0f32; c * h * w];
        let mut weight = vec![0f32; h * w];
        for &y0 in &ys {
            let th = tile.min(h - y0);
            let wy = ramp(th, overlap, y0 > 0, y0 + th < h);
            for &x0 in &xs {
                let tw = tile.min(w - x0);
                let wx = ramp(tw, overlap, x0 > 0, x0 + tw < w);
                let crop = up.narrow(2, y0, th)?.narrow(3, x0, tw)?;
                let padded = reflect_pad_to_multiple(&crop, INPUT_MULTIPLE)?;
                let out = self
                    .forward(&padded)?
                    .narrow(2, 0, th)?
                    .narrow(3, 0, tw)?
                    .to_dtype(DType::F32)?
                    .to_device(&Device::Cpu)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                for ch in 0..c {
                    for i in 0..th {
                        for j in 0..tw {
                            let wgt = wy[i] * wx[j];
                            acc[ch * h * w + (y0 + i) * w + x0 + j] += wgt * out[ch * th * tw + i * tw + j];
                            if ch == 0 {
                                weight[(y0 + i) * w + x0 + j] += wgt;
                            }
                        }
                    }
                }
            }
        }
        for ch in 0..c {
            for p in 0..h * w {
                acc[ch * h * w + p] /= weight[p];
            }
        }
        Ok(Tensor::from_vec(acc, (1, c, h, w), up.device())?.to_dtype(up.dtype())?)
    }
}

fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|s| s + tile < len).collect();
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Linear blending weights, ramping over `overlap` pixels on interior edges.
fn ramp(len: usize, overlap: usize, ramp_start: bool, ramp_end: bool) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let mut v = 1.0f32;
            if ramp_start && overlap > 0 {
                v = v.min((i as f32 + 0.5) / overlap as f32);
            }
            if ramp_end && overlap > 0 {
                v = v.min(((len - i) as f32 - 0.5) / overlap as f32);
            }
            v.clamp(1e-3, 1.0)
        })
        .collect()
}

fn reflect_indices(len: usize, padded: usize) -> Vec<u32> {
    (0..padded)
        .map(|i| {
            if len == 1 {
                0
            } else {
                let period = 2 * (len - 1);
                let m = i % period;
                (if m < len { m } else { period - m }) as u32
            }
        })
        .collect()
}

/// Reflect-pad the bottom and right edges of `[N, C, H, W]` up to multiples of `m`.
pub fn reflect_pad_to_multiple(x: &Tensor, m: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    // index_select needs a contiguous source; tiles are narrowed views
    let mut out = x.contiguous()?;
    if ph != h {
        let idx = Tensor::new(reflect_indices(h, ph), x.device())?;
        out = out.index_select(&idx, 2)?;
    }
    if pw != w {
        let idx = Tensor::new(reflect_indices(w, pw), x.device())?;
        out = out.index_select(&idx, 3)?;
    }
    Ok(out)
}
