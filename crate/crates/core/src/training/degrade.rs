//! First-order synthetic degradation: blur → bicubic downscale → Gaussian
//! noise → JPEG round-trip.

use std::io::Cursor;

use candle_core::{DType, Device, Tensor};
use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lite_ed::image_io::{image_to_tensor, tensor_to_image};
use crate::lite_ed::resize_bicubic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub scale: usize,
    pub blur: bool,
    pub blur_sigma_range: [f64; 2],
    pub noise: bool,
    /// Standard deviation on [0, 1] images.
    pub noise_sigma_range: [f64; 2],
    pub jpeg: bool,
    pub jpeg_quality_range: [u8; 2],
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            blur: true,
            blur_sigma_range: [0.2, 3.0],
            noise: true,
            noise_sigma_range: [0.0, 0.1],
            jpeg: true,
            jpeg_quality_range: [40, 95],
            seed: 0,
        }
    }
}

impl DegradationConfig {
    /// Pure bicubic downscaling.
    pub fn bicubic_only(scale: usize) -> Self {
        Self {
            scale,
            blur: false,
            noise: false,
            jpeg: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1];
        if self.scale == 0 {
            return Err(Error::Config("degrade.scale must be positive".into()));
        }
        if !ordered(self.blur_sigma_range) || !ordered(self.noise_sigma_range) {
            return Err(Error::Config("degrade ranges must be non-negative and ordered".into()));
        }
        let [q0, q1] = self.jpeg_quality_range;
        if q0 == 0 || q0 > q1 || q1 > 100 {
            return Err(Error::Config(format!(
                "degrade.jpeg_quality_range must lie in 1..=100 and be ordered, got {:?}",
                self.jpeg_quality_range
            )));
        }
        Ok(())
    }
}

/// A degradation model; implementations must be pure in `(hr, index)`.
pub trait Degrader {
    fn degrade(&self, hr: &Tensor, index: u64) -> Result<Tensor>;
}

pub struct FirstOrderDegrader {
    pub config: DegradationConfig,
}

impl Degrader for FirstOrderDegrader {
    fn degrade(&self, hr: &Tensor, index: u64) -> Result<Tensor> {
        degrade(hr, &self.config, index)
    }
}

fn gaussian_matrix(n: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut m[i * n..(i + 1) * n];
        let mut total = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            let j = (i as i64 + k as i64 - radius).clamp(0, n as i64 - 1) as usize;
            row[j] += w;
            total += w;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    m
}

/// Separable Gaussian blur with edge clamping, `[N, C, H, W]`.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mh = Tensor::from_vec(gaussian_matrix(h, sigma), (h, h), x.device())?.to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(gaussian_matrix(w, sigma), (w, w), x.device())?
        .to_dtype(x.dtype())?
        .t()?;
    let flat = x.reshape((n * c, h, w))?;
    Ok(mh.broadcast_matmul(&flat)?.broadcast_matmul(&mw)?.reshape((n, c, h, w))?)
}

fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(img)?;
    Ok(image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8())
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Degrade a batch of HR images in [-1, 1]. Sample `i` of the batch draws its
/// parameters from a generator seeded by `(config.seed, index + i)`.
pub fn degrade(hr: &Tensor, config: &DegradationConfig, index: u64) -> Result<Tensor> {
    config.validate()?;
    let (n, c, h, w) = hr.dims4()?;
    let s = config.scale;
    if h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "HR size {h}x{w} is not divisible by scale {s}"
        )));
    }
    let device = hr.device().clone();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_add(i as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = ((hr.narrow(0, i, 1)?.to_dtype(DType::F64)? + 1.0)? * 0.5)?;
        if config.blur {
            let sigma = sample_range(&mut rng, config.blur_sigma_range);
            if sigma > 0.0 {
                x = gaussian_blur(&x, sigma)?;
            }
        }
        x = resize_bicubic(&x, h / s, w / s, true)?;
        if config.noise {
            let sigma = sample_range(&mut rng, config.noise_sigma_range);
            let noise: Vec<f64> = (0..c * (h / s) * (w / s))
                .map(|_| rng.sample::<f64, _>(StandardNormal) * sigma)
                .collect();
            x = (x + Tensor::from_vec(noise, (1, c, h / s, w / s), &device)?)?;
        }
        x = x.clamp(0.0, 1.0)?;
        let mut lr = ((x * 2.0)? - 1.0)?.to_dtype(DType::F32)?;
        if config.jpeg {
            let [q0, q1] = config.jpeg_quality_range;
            let q = rng.random_range(q0..=q1);
            let img = jpeg_round_trip(&tensor_to_image(&lr.to_device(&Device::Cpu)?)?, q)?;
            lr = image_to_tensor(&img, &device)?;
        }
        out.push(lr.to_dtype(hr.dtype())?);
    }
    Ok(Tensor::cat(&out, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn blur_preserves_constants() -> Result<()> {
        let x = Tensor::full(0.3f64, (1, 1, 9, 7), &Device::Cpu)?;
        let y = gaussian_blur(&x, 1.7)?;
        assert!((y - 0.3)?.abs()?.max_all()?.to_scalar::<f64>()? < 1e-12);
        Ok(())
    }

    #[test]
    fn shape_and_divisibility() -> Result<()> {
        let mut init = Init::new(0, &Device::Cpu, DType::F32);
        let hr = init.uniform(&[2, 3, 32, 32], 1.0)?;
        let lr = degrade(&hr, &DegradationConfig::default(), 0)?;
        assert_eq!(lr.dims(), &[2, 3, 8, 8]);
        let odd = init.uniform(&[1, 3, 30, 30], 1.0)?;
        assert!(degrade(&odd, &DegradationConfig::default(), 0).is_err());
        Ok(())
    }
}
