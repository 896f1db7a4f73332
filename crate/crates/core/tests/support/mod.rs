#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use pocketsr::nn::Init;
use pocketsr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn init64(seed: u64) -> Init {
    Init::new(seed, &Device::Cpu, DType::F64)
}

pub fn init32(seed: u64) -> Init {
    Init::new(seed, &Device::Cpu, DType::F32)
}

/// Uniform values in [-1, 1) from a fixed seed.
pub fn random(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of the
/// gradient of the scalar `f` at `x`, using central differences with step `h`.
/// All tensors are expected in f64.
pub fn gradient_error(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let var = Var::from_tensor(&x.detach())?;
    let loss = f(var.as_tensor())?;
    let grads = loss.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => values(g)?,
        None => vec![0.0; x.elem_count()],
    };
    let base = values(x)?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = scalar(&f(&Tensor::from_vec(plus, x.dims(), x.device())?)?)?;
        let fm = scalar(&f(&Tensor::from_vec(minus, x.dims(), x.device())?)?)?;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    assert!(scale > 1e-10, "gradient is identically zero; the check would be vacuous");
    Ok(norm(&diff) / scale)
}

/// Reduce a tensor to a scalar through fixed random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = random(t.dims(), seed, t.dtype())?;
    Ok((t * w)?.sum_all()?)
}
