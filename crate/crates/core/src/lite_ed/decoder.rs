use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{self, Conv2d, ConvSpec, Init, Params};

use super::encoder::ASC_STAGES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiteDecoderConfig {
    pub channel_cap: usize,
    pub upsample_stages: usize,
    pub blocks_per_stage: usize,
    pub head_resblocks: usize,
    pub latent_channels: usize,
    pub output_channels: usize,
}

impl Default for LiteDecoderConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl LiteDecoderConfig {
    pub fn full_scale() -> Self {
        Self {
            channel_cap: 64,
            upsample_stages: 3,
            blocks_per_stage: 3,
            head_resblocks: 1,
            latent_channels: 4,
            output_channels: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            channel_cap: 16,
            blocks_per_stage: 1,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_stages != 3 {
            return Err(Error::Config(format!(
                "decoder must upsample exactly 8x (3 stages), got {} stages",
                self.upsample_stages
            )));
        }
        if self.channel_cap == 0 || self.channel_cap > 64 {
            return Err(Error::Config(format!(
                "decoder channel_cap must be in 1..=64, got {}",
                self.channel_cap
            )));
        }
        if self.head_resblocks == 0 || self.latent_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Gated skip inputs for the decoder: one source per stage plus per-sample gains.
pub struct SkipInputs<'a> {
    pub sources: &'a [Tensor],
    /// `[N, 4]`
    pub kappa: &'a Tensor,
}

/// A latent-to-image decoder. Implementations must upsample exactly 8×.
pub trait LatentDecoder: Params {
    fn decode(&self, latent: &Tensor, skips: Option<&SkipInputs>) -> Result<Tensor>;
}

/// Three 3×3 convs with ReLU and an identity shortcut.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl_params!(ConvBlock { conv1, conv2, conv3 });

impl ConvBlock {
    pub fn new(channels: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ConvSpec::new(channels, channels, 3), init)?,
            conv2: Conv2d::new(ConvSpec::new(channels, channels, 3), init)?,
            conv3: Conv2d::new(ConvSpec::new(channels, channels, 3), init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        let h = self.conv3.forward(&h)?;
        Ok((h + x)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub blocks: Vec<ConvBlock>,
    pub conv: Conv2d,
}

impl_params!(DecoderStage { blocks, conv });

#[derive(Clone, Debug)]
pub struct LiteDecoder {
    pub conv_in: Conv2d,
    pub stages: Vec<DecoderStage>,
    pub head: Vec<ConvBlock>,
    pub conv_out: Conv2d,
    /// Zero-initialized 3×3 convs mapping each skip source into the stage.
    pub skip_convs: Vec<Conv2d>,
}

impl_params!(LiteDecoder { conv_in, stages, head, conv_out, skip_convs });

impl LiteDecoder {
    pub fn new(config: &LiteDecoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let c = config.channel_cap;
        let conv_in = Conv2d::new(ConvSpec::new(config.latent_channels, c, 3), init)?;
        let mut stages = Vec::with_capacity(config.upsample_stages);
        for _ in 0..config.upsample_stages {
            let blocks = (0..config.blocks_per_stage)
                .map(|_| ConvBlock::new(c, init))
                .collect::<Result<Vec<_>>>()?;
            stages.push(DecoderStage {
                blocks,
                conv: Conv2d::new(ConvSpec::new(c, c, 3).no_bias(), init)?,
            });
        }
        let head = (0..config.head_resblocks)
            .map(|_| ConvBlock::new(c, init))
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv2d::new(ConvSpec::new(c, config.output_channels, 3), init)?;
        let skip_convs = (0..ASC_STAGES)
            .map(|_| Conv2d::zeros(ConvSpec::new(config.output_channels, c, 3), init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv_in,
            stages,
            head,
            conv_out,
            skip_convs,
        })
    }

    /// Largest channel count of any layer.
    pub fn max_width(&self) -> usize {
        let mut widest = 0;
        self.visit("", &mut |name, t| {
            if name.ends_with("weight") && t.rank() == 4 {
                widest = widest.max(t.dims()[0]).max(t.dims()[1]);
            }
        });
        widest
    }

    fn add_skip(&self, h: &Tensor, stage: usize, skips: Option<&SkipInputs>) -> Result<Tensor> {
        let Some(s) = skips else {
            return Ok(h.clone());
        };
        let src = &s.sources[stage];
        let (n, _, hh, hw) = h.dims4()?;
        let (sn, _, sh, sw) = src.dims4()?;
        if (sn, sh, sw) != (n, hh, hw) {
            return Err(Error::Shape(format!(
                "skip source {stage} is {:?}, decoder stage expects {n}x?x{hh}x{hw}",
                src.dims()
            )));
        }
        let gain = s.kappa.narrow(1, stage, 1)?.reshape((n, 1, 1, 1))?;
        let injected = self.skip_convs[stage].forward(src)?.broadcast_mul(&gain)?;
        Ok((h + injected)?)
    }
}

impl LatentDecoder for LiteDecoder {
    fn decode(&self, latent: &Tensor, skips: Option<&SkipInputs>) -> Result<Tensor> {
        let (n, c, _, _) = latent.dims4()?;
        if c != self.conv_in.in_channels() {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.conv_in.in_channels()
            )));
        }
        if let Some(s) = skips {
            if s.sources.len() != ASC_STAGES || s.kappa.dims() != [n, ASC_STAGES] {
                return Err(Error::Shape(format!(
                    "decoder needs {ASC_STAGES} skip sources and kappa [{n}, {ASC_STAGES}], got {} and {:?}",
                    s.sources.len(),
                    s.kappa.dims()
                )));
            }
        }
        let z = ((latent / 3.0)?.tanh()? * 3.0)?;
        let mut h = self.conv_in.forward(&z)?.relu()?;
        for (i, stage) in self.stages.iter().enumerate() {
            h = self.add_skip(&h, i, skips)?;
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
            h = stage.conv.forward(&nn::upsample2x(&h)?)?;
        }
        h = self.add_skip(&h, self.stages.len(), skips)?;
        for block in &self.head {
            h = block.forward(&h)?;
        }
        self.conv_out.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count;
    use candle_core::{DType, Device};

    #[test]
    fn full_scale_layout() -> Result<()> {
        let mut init = Init::new(0, &Device::Cpu, DType::F32);
        let dec = LiteDecoder::new(&LiteDecoderConfig::full_scale(), &mut init)?;
        let skip_params = 4 * (9 * 3 * 64 + 64);
        assert_eq!(param_count(&dec) - skip_params, 1_222_531);
        assert_eq!(dec.max_width(), 64);
        Ok(())
    }

    #[test]
    fn upsamples_eight_times() -> Result<()> {
        let mut init = Init::new(1, &Device::Cpu, DType::F32);
        let dec = LiteDecoder::new(&LiteDecoderConfig::toy(), &mut init)?;
        let z = init.normal(&[1, 4, 8, 8], 1.0)?;
        assert_eq!(dec.decode(&z, None)?.dims(), &[1, 3, 64, 64]);
        Ok(())
    }

    #[test]
    fn skip_resolution_mismatch_is_rejected() -> Result<()> {
        let mut init = Init::new(2, &Device::Cpu, DType::F32);
        let dec = LiteDecoder::new(&LiteDecoderConfig::toy(), &mut init)?;
        let z = init.normal(&[1, 4, 4, 4], 1.0)?;
        let sources: Vec<Tensor> = (0..4)
            .map(|_| Tensor::zeros((1, 3, 5, 5), DType::F32, &Device::Cpu).unwrap())
            .collect();
        let kappa = Tensor::ones((1, 4), DType::F32, &Device::Cpu)?;
        let skips = SkipInputs {
            sources: &sources,
            kappa: &kappa,
        };
        assert!(dec.decode(&z, Some(&skips)).is_err());
        Ok(())
    }
}
