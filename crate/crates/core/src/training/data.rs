use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lite_ed::image_io::image_to_tensor;

/// All PNG images in a directory, decoded up front.
pub struct ImageDataset {
    pub paths: Vec<PathBuf>,
    images: Vec<RgbImage>,
}

impl ImageDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no PNG images in {}", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| Ok(image::open(p)?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { paths, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `batch` random `crop`×`crop` patches in [-1, 1]. `crop` must be a
    /// multiple of `multiple` and no image may be smaller than it.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        crop: usize,
        multiple: usize,
        device: &Device,
    ) -> Result<Tensor> {
        if crop == 0 || crop % multiple != 0 {
            return Err(Error::Dataset(format!(
                "crop size {crop} must be a positive multiple of {multiple}"
            )));
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let img = &self.images[rng.random_range(0..self.images.len())];
            let (w, h) = img.dimensions();
            let (w, h) = (w as usize, h as usize);
            if w < crop || h < crop {
                return Err(Error::Dataset(format!(
                    "image of {w}x{h} is smaller than the {crop}x{crop} crop"
                )));
            }
            let x0 = rng.random_range(0..=w - crop) as u32;
            let y0 = rng.random_range(0..=h - crop) as u32;
            let patch = image::imageops::crop_imm(img, x0, y0, crop as u32, crop as u32).to_image();
            out.push(image_to_tensor(&patch, device)?);
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

/// Smooth random RGB image: a sum of a few oriented sinusoids plus a disc.
pub fn synthetic_image(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.15..0.35),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    let (cx, cy, r) = (
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.1..0.3),
    );
    let tint: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = RgbImage::new(size as u32, size as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        let inside = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() < r;
        for c in 0..3 {
            let mut val = 0.5;
            for (k, wv) in waves.iter().enumerate() {
                let phase = wv[0] * std::f64::consts::TAU * (u * wv[1].cos() + v * wv[1].sin()) + wv[2];
                val += wv[3] * (phase + wv[4] * c as f64 + k as f64).sin() * 0.5;
            }
            if inside {
                val = 0.5 * val + 0.5 * tint[c];
            }
            px[c] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Write `count` synthetic PNGs of `size`×`size` into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let path = dir.join(format!("img_{i:04}.png"));
        synthetic_image(size, &mut rng).save(&path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ImageDataset::open(dir.path()).is_err());
    }

    #[test]
    fn crops_have_requested_size() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 3, 80, 1)?;
        let ds = ImageDataset::open(dir.path())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ds.sample_batch(&mut rng, 2, 64, 8, &Device::Cpu)?;
        assert_eq!(b.dims(), &[2, 3, 64, 64]);
        assert!(ds.sample_batch(&mut rng, 1, 96, 8, &Device::Cpu).is_err());
        assert!(ds.sample_batch(&mut rng, 1, 60, 8, &Device::Cpu).is_err());
        Ok(())
    }
}
