use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{Conv2d, ConvSpec, Init, Linear};

use super::resample::resize_bicubic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiteEncoderConfig {
    pub stem_channels: usize,
    /// Width of the injected feature taken after the second layer.
    pub dfi_channels: usize,
    pub hidden_channels: usize,
    pub latent_channels: usize,
    pub asc_hidden: usize,
}

impl Default for LiteEncoderConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl LiteEncoderConfig {
    pub fn full_scale() -> Self {
        Self {
            stem_channels: 64,
            dfi_channels: 320,
            hidden_channels: 128,
            latent_channels: 4,
            asc_hidden: 64,
        }
    }

    pub fn toy() -> Self {
        Self {
            stem_channels: 16,
            dfi_channels: 16,
            hidden_channels: 16,
            latent_channels: 4,
            asc_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.stem_channels, self.dfi_channels, self.hidden_channels, self.latent_channels, self.asc_hidden]
            .contains(&0)
        {
            return Err(Error::Config("lite encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron producing the four skip gains from the pooled
/// injected feature. The output layer starts at zero weights and unit bias.
#[derive(Clone, Debug)]
pub struct AscMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_params!(AscMlp { fc1, fc2 });

pub const ASC_STAGES: usize = 4;

impl AscMlp {
    pub fn new(input: usize, hidden: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(input, hidden, true, init)?,
            fc2: Linear::zeros(hidden, ASC_STAGES, 1.0, init)?,
        })
    }

    /// `[N, input]` → `[N, 4]`.
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(pooled)?.silu()?)
    }
}

pub struct EncoderOutput {
    pub latent: Tensor,
    pub dfi_feature: Tensor,
    /// Input image at the four decoder stage resolutions (H/8, H/4, H/2, H).
    pub skip_sources: Vec<Tensor>,
    /// Spatially pooled `dfi_feature`, `[N, dfi_channels]`.
    pub asc_input: Tensor,
}

#[derive(Clone, Debug)]
pub struct LiteEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub conv4: Conv2d,
    pub asc: AscMlp,
}

impl_params!(LiteEncoder { conv1, conv2, conv3, conv4, asc });

impl LiteEncoder {
    pub fn new(config: &LiteEncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            conv1: Conv2d::new(ConvSpec::new(3, config.stem_channels, 5).stride(4), init)?,
            conv2: Conv2d::new(
                ConvSpec::new(config.stem_channels, config.dfi_channels, 3).stride(2),
                init,
            )?,
            conv3: Conv2d::new(ConvSpec::new(config.dfi_channels, config.hidden_channels, 3), init)?,
            conv4: Conv2d::new(ConvSpec::new(config.hidden_channels, config.latent_channels, 3), init)?,
            asc: AscMlp::new(config.dfi_channels, config.asc_hidden, init)?,
        })
    }

    pub fn dfi_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn latent_channels(&self) -> usize {
        self.conv4.out_channels()
    }

    pub fn encode(&self, image: &Tensor) -> Result<EncoderOutput> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder input must be [N, 3, H, W] with H and W divisible by 8, got {:?}",
                image.dims()
            )));
        }
        let x = self.conv1.forward(image)?.silu()?;
        let dfi_feature = self.conv2.forward(&x)?.silu()?;
        let x = self.conv3.forward(&dfi_feature)?.silu()?;
        let latent = self.conv4.forward(&x)?;
        let asc_input = dfi_feature.mean(3)?.mean(2)?;
        Ok(EncoderOutput {
            latent,
            dfi_feature,
            skip_sources: skip_sources(image)?,
            asc_input,
        })
    }

    pub fn asc_coefficients(&self, asc_input: &Tensor) -> Result<Tensor> {
        self.asc.forward(asc_input)
    }
}

/// Bicubic copies of `image` at H/8, H/4, H/2 and H.
pub fn skip_sources(image: &Tensor) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = image.dims4()?;
    (0..ASC_STAGES)
        .map(|i| {
            let f = 1 << (3 - i);
            resize_bicubic(image, h / f, w / f, true)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count;
    use candle_core::{DType, Device};

    #[test]
    fn full_scale_shapes() -> Result<()> {
        let mut init = Init::new(0, &Device::Cpu, DType::F32);
        let enc = LiteEncoder::new(&LiteEncoderConfig::full_scale(), &mut init)?;
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu)?;
        let out = enc.encode(&x)?;
        assert_eq!(out.latent.dims(), &[1, 4, 8, 8]);
        assert_eq!(out.dfi_feature.dims(), &[1, 320, 8, 8]);
        assert_eq!(out.asc_input.dims(), &[1, 320]);
        let sizes: Vec<_> = out.skip_sources.iter().map(|s| s.dims()[2]).collect();
        assert_eq!(sizes, vec![8, 16, 32, 64]);
        // 4864 + 184640 + 368768 + 4612 + (20544 + 260)
        assert_eq!(param_count(&enc), 583_688);
        Ok(())
    }

    #[test]
    fn rejects_non_divisible_input() {
        let mut init = Init::new(0, &Device::Cpu, DType::F32);
        let enc = LiteEncoder::new(&LiteEncoderConfig::toy(), &mut init).unwrap();
        let x = Tensor::zeros((1, 3, 100, 100), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.encode(&x).is_err());
    }

    #[test]
    fn zero_output_layer_yields_bias() -> Result<()> {
        let mut init = Init::new(4, &Device::Cpu, DType::F64);
        let asc = AscMlp::new(6, 5, &mut init)?;
        let x = init.normal(&[3, 6], 3.0)?;
        let k = asc.forward(&x)?;
        assert_eq!(k.dims(), &[3, 4]);
        assert!(k.flatten_all()?.to_vec1::<f64>()?.iter().all(|&v| v == 1.0));
        Ok(())
    }
}
