use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{self, Conv2d, ConvSpec, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    pub lambda_distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 2.0,
            lambda_lpips: 2.0,
            lambda_gan: 0.25,
            lambda_distill: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_mse, self.lambda_lpips, self.lambda_gan, self.lambda_distill];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {w:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Scalar loss terms before weighting.
pub struct LossTerms {
    pub mse: Tensor,
    pub lpips: Tensor,
    pub gan: Tensor,
    pub distill: Option<Tensor>,
}

/// Plain-number copy of the terms for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub mse: f64,
    pub lpips: f64,
    pub gan: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ1·mse + λ2·lpips + λ3·gan (+ λ4·distill)`; a distillation term is an error
/// in stage one.
pub fn combine(terms: &LossTerms, weights: &LossWeights, stage: Stage) -> Result<(Tensor, LossValues)> {
    weights.validate()?;
    if stage == Stage::One && terms.distill.is_some() {
        return Err(Error::InvalidArgument(
            "distillation loss is only defined for stage 2".into(),
        ));
    }
    let mut total = ((&terms.mse * weights.lambda_mse)? + (&terms.lpips * weights.lambda_lpips)?)?;
    total = (total + (&terms.gan * weights.lambda_gan)?)?;
    if let Some(d) = &terms.distill {
        total = (total + (d * weights.lambda_distill)?)?;
    }
    let values = LossValues {
        total: scalar(&total)?,
        mse: scalar(&terms.mse)?,
        lpips: scalar(&terms.lpips)?,
        gan: scalar(&terms.gan)?,
        distill: terms.distill.as_ref().map(scalar).transpose()?,
    };
    Ok((total, values))
}

/// Compose the generator objective from images. `fake_scores` are the
/// discriminator's scores on `sr`; without them the adversarial term is 0.
pub fn compose_loss(
    sr: &Tensor,
    hr: &Tensor,
    perceptual: &dyn Perceptual,
    fake_scores: Option<&Tensor>,
    distill: Option<&Tensor>,
    weights: &LossWeights,
    stage: Stage,
) -> Result<(Tensor, LossValues)> {
    if sr.dims() != hr.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            sr.dims(),
            hr.dims()
        )));
    }
    let mse = (sr - hr)?.sqr()?.mean_all()?;
    let lpips = perceptual.distance(sr, hr)?;
    let gan = match fake_scores {
        Some(s) => generator_hinge(s)?,
        None => Tensor::zeros((), sr.dtype(), sr.device())?,
    };
    combine(
        &LossTerms {
            mse,
            lpips,
            gan,
            distill: distill.cloned(),
        },
        weights,
        stage,
    )
}

/// `E[max(0, 1 − D(real))] + E[max(0, 1 + D(fake))]`
pub fn discriminator_hinge(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `−E[D(fake)]`
pub fn generator_hinge(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

pub fn adversarial_losses(disc: &PatchDiscriminator, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} differ",
            real.dims(),
            fake.dims()
        )));
    }
    let d_loss = discriminator_hinge(&disc.forward(real)?, &disc.forward(&fake.detach())?)?;
    let g_loss = generator_hinge(&disc.forward(fake)?)?;
    Ok((d_loss, g_loss))
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

/// Four-layer strided patch discriminator.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub convs: Vec<Conv2d>,
}

impl_params!(PatchDiscriminator { convs });

impl PatchDiscriminator {
    pub fn new(base: usize, init: &mut Init) -> Result<Self> {
        let widths = [3, base, base * 2, base * 4];
        let mut convs = Vec::with_capacity(4);
        for w in widths.windows(2) {
            convs.push(Conv2d::new(ConvSpec::new(w[0], w[1], 4).stride(2).padding(1), init)?);
        }
        convs.push(Conv2d::new(ConvSpec::new(base * 4, 1, 3), init)?);
        Ok(Self { convs })
    }

    /// Patch scores `[N, 1, H/8, W/8]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// A perceptual distance between image batches, returning a scalar tensor.
/// A pretrained LPIPS network can be plugged in through this trait.
pub trait Perceptual {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
}

/// Frozen random convolutional features with channel-unit-normalized
/// squared differences averaged over positions and summed over layers.
#[derive(Clone, Debug)]
pub struct RandomConvPerceptual {
    pub convs: Vec<Conv2d>,
}

impl_params!(RandomConvPerceptual { convs });

pub const PERCEPTUAL_SEED: u64 = 0x5EED_1E5;

impl RandomConvPerceptual {
    pub fn new(device: &Device, dtype: DType) -> Result<Self> {
        let mut init = Init::new(PERCEPTUAL_SEED, device, dtype);
        let mut convs = vec![
            Conv2d::new(ConvSpec::new(3, 16, 3), &mut init)?,
            Conv2d::new(ConvSpec::new(16, 32, 3).stride(2), &mut init)?,
            Conv2d::new(ConvSpec::new(32, 64, 3).stride(2), &mut init)?,
        ];
        nn::freeze(&mut convs);
        Ok(Self { convs })
    }

    fn unit(x: &Tensor) -> Result<Tensor> {
        let norm = (x.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
        Ok(x.broadcast_div(&norm)?)
    }
}

impl Perceptual for RandomConvPerceptual {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (mut fa, mut fb) = (a.clone(), b.clone());
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for conv in &self.convs {
            fa = conv.forward(&fa)?.relu()?;
            fb = conv.forward(&fb)?.relu()?;
            let d = (Self::unit(&fa)? - Self::unit(&fb)?)?.sqr()?.sum_keepdim(1)?.mean_all()?;
            total = (total + d)?;
        }
        Ok(total)
    }
}
