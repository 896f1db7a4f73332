//! 8-bit RGB PNG ↔ `[1, 3, H, W]` f32 tensors. Pixel value `p` maps to
//! `p / 127.5 − 1`, so the internal range is [-1, 1].

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub fn image_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), device)?)
}

/// Values are clamped to [-1, 1] and rounded to the nearest 8-bit level.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!(
            "expected a single RGB image [1, 3, H, W], got {:?}",
            t.dims()
        )));
    }
    let data = t
        .to_device(&Device::Cpu)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = data[ch * h * w + y as usize * w + x as usize];
            px[ch] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        }
    }
    Ok(img)
}

pub fn load_png(path: &Path, device: &Device) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    image_to_tensor(&img, device)
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_image(t)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() -> Result<()> {
        let mut img = RgbImage::new(5, 3);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = image::Rgb([(x * 50) as u8, (y * 80) as u8, 255 - (x * 10) as u8]);
        }
        let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
        let path = dir.path().join("a.png");
        save_png(&image_to_tensor(&img, &Device::Cpu)?, &path)?;
        let back = tensor_to_image(&load_png(&path, &Device::Cpu)?)?;
        assert_eq!(back, img);
        Ok(())
    }
}
