//! Separable bicubic resampling expressed as two matrix products, so it is
//! differentiable and runs on any device.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * CUBIC_A
    } else {
        0.0
    }
}

/// `[out, in]` interpolation matrix with edge clamping. When shrinking and
/// `antialias` is set, the kernel is stretched by the scale factor.
pub fn resize_matrix(input: usize, output: usize, antialias: bool) -> Vec<f64> {
    let scale = input as f64 / output as f64;
    let support = if antialias && scale > 1.0 { scale } else { 1.0 };
    let mut m = vec![0.0; output * input];
    for o in 0..output {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = (center - 2.0 * support).floor() as i64;
        let hi = (center + 2.0 * support).ceil() as i64;
        let mut total = 0.0;
        let row = &mut m[o * input..(o + 1) * input];
        for j in lo..=hi {
            let w = cubic((j as f64 - center) / support);
            if w == 0.0 {
                continue;
            }
            let idx = j.clamp(0, input as i64 - 1) as usize;
            row[idx] += w;
            total += w;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    m
}

fn matrix(input: usize, output: usize, antialias: bool, device: &Device, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(resize_matrix(input, output, antialias), (output, input), device)?.to_dtype(dtype)?)
}

/// Bicubic resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
pub fn resize_bicubic(x: &Tensor, out_h: usize, out_w: usize, antialias: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {:?} to {out_h}x{out_w}",
            x.dims()
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let wh = matrix(h, out_h, antialias, x.device(), x.dtype())?;
    let ww = matrix(w, out_w, antialias, x.device(), x.dtype())?.t()?;
    let flat = x.reshape((n * c, h, w))?;
    let rows = wh.broadcast_matmul(&flat)?;
    let out = rows.broadcast_matmul(&ww)?;
    Ok(out.reshape((n, c, out_h, out_w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (i, o, aa) in [(16, 64, false), (64, 16, true), (7, 3, true), (5, 5, false)] {
            let m = resize_matrix(i, o, aa);
            for r in m.chunks(i) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() -> Result<()> {
        let x = Tensor::full(0.25f64, (1, 3, 8, 8), &Device::Cpu)?;
        let y = resize_bicubic(&x, 32, 32, false)?;
        let d = (y - 0.25)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(d < 1e-12);
        Ok(())
    }

    #[test]
    fn identity_size_is_noop() -> Result<()> {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu)?.reshape((1, 1, 4, 4))?;
        let y = resize_bicubic(&x, 4, 4, true)?;
        assert_eq!(y.flatten_all()?.to_vec1::<f32>()?, x.flatten_all()?.to_vec1::<f32>()?);
        Ok(())
    }
}
