//! Minimal layer toolkit on top of candle tensors.
//!
//! Every layer stores its parameters as plain [`Tensor`]s. A tensor that was
//! created from a [`Var`] is trainable; a detached tensor is frozen. The
//! [`Params`] visitor gives named access to every parameter so that counting,
//! hashing, freezing, checkpointing and optimizer wiring all share one walk.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named parameter traversal.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self)
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(inner) = self {
            inner.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f)
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

impl<T: Params + ?Sized> Params for Box<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        (**self).visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        (**self).visit_mut(prefix, f)
    }
}

/// Implements [`Params`] for a struct by listing its parameter-bearing fields.
#[macro_export]
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &candle_core::Tensor)) {
                $( $crate::nn::Params::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut candle_core::Tensor),
            ) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

pub fn named_tensors<P: Params + ?Sized>(m: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count<P: Params + ?Sized>(m: &P) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.elem_count());
    n
}

/// Parameter counts keyed by full parameter name.
pub fn param_counts_by_name<P: Params + ?Sized>(m: &P) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    m.visit("", &mut |name, t| {
        out.insert(name.to_string(), t.elem_count());
    });
    out
}

/// Variables backing every trainable parameter, in visit order.
pub fn trainable_vars<P: Params + ?Sized>(m: &P) -> Result<Vec<Var>> {
    let mut out = Vec::new();
    let mut err = None;
    m.visit("", &mut |_, t| {
        if t.is_variable() {
            match Var::from_tensor(t) {
                Ok(v) => out.push(v),
                Err(e) => err = Some(e),
            }
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

pub fn trainable_count<P: Params + ?Sized>(m: &P) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| {
        if t.is_variable() {
            n += t.elem_count()
        }
    });
    n
}

/// Detach every parameter from the autograd graph.
pub fn freeze<P: Params + ?Sized>(m: &mut P) {
    m.visit_mut("", &mut |_, t| *t = t.detach());
}

/// Turn every parameter into a fresh trainable variable (copies storage).
pub fn make_trainable<P: Params + ?Sized>(m: &mut P) -> Result<()> {
    let mut err = None;
    m.visit_mut("", &mut |_, t| match Var::from_tensor(&t.detach()) {
        Ok(v) => *t = v.as_tensor().clone(),
        Err(e) => err = Some(e),
    });
    err.map_or(Ok(()), |e| Err(e.into()))
}

/// Give every parameter its own storage, keeping the trainable flag.
pub fn deep_copy<P: Params + Clone>(m: &P) -> Result<P> {
    let mut out = m.clone();
    let mut err = None;
    out.visit_mut("", &mut |_, t| {
        let res = t.copy().and_then(|c| {
            if t.is_variable() {
                Var::from_tensor(&c).map(|v| v.as_tensor().clone())
            } else {
                Ok(c.detach())
            }
        });
        match res {
            Ok(c) => *t = c,
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(out), |e| Err(e.into()))
}

/// Frozen deep copy: new storage, no gradient tracking.
pub fn frozen_copy<P: Params + Clone>(m: &P) -> Result<P> {
    let mut out = deep_copy(m)?;
    freeze(&mut out);
    Ok(out)
}

/// SHA-256 over parameter names, shapes and little-endian f32 values.
pub fn weight_hash<P: Params + ?Sized>(m: &P) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut err = None;
    m.visit("", &mut |name, t| {
        hasher.update(name.as_bytes());
        hasher.update(format!("{:?}", t.dims()).as_bytes());
        match t
            .to_dtype(DType::F64)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1::<f64>())
        {
            Ok(values) => {
                for v in values {
                    hasher.update(v.to_le_bytes());
                }
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(hex::encode(hasher.finalize())),
    }
}

/// Hash of parameter names and shapes only.
pub fn architecture_hash<P: Params + ?Sized>(m: &P) -> String {
    let mut hasher = Sha256::new();
    m.visit("", &mut |name, t| {
        hasher.update(name.as_bytes());
        hasher.update(format!("{:?};", t.dims()).as_bytes());
    });
    hex::encode(hasher.finalize())
}

/// Copy values from `source` into every parameter, matched by `prefix.name`.
/// Trainable parameters stay trainable, frozen ones stay frozen.
pub fn load_named<P: Params + ?Sized>(
    m: &mut P,
    prefix: &str,
    source: &std::collections::HashMap<String, Tensor>,
) -> Result<()> {
    let mut err: Option<Error> = None;
    m.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(src) = source.get(name) else {
            err = Some(Error::Checkpoint(format!("missing tensor `{name}`")));
            return;
        };
        if src.dims() != t.dims() {
            err = Some(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                src.dims(),
                t.dims()
            )));
            return;
        }
        let res = src.to_dtype(t.dtype()).and_then(|v| {
            if t.is_variable() {
                Var::from_tensor(&v.detach()).map(|var| var.as_tensor().clone())
            } else {
                v.copy().map(|c| c.detach())
            }
        });
        match res {
            Ok(v) => *t = v,
            Err(e) => err = Some(e.into()),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
    pub device: Device,
    pub dtype: DType,
}

impl Init {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            dtype,
        }
    }

    pub fn cpu(seed: u64) -> Self {
        Self::new(seed, &Device::Cpu, DType::F32)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn trainable(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?.as_tensor().clone())
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.trainable(values, shape)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                z * std
            })
            .collect();
        self.trainable(values, shape)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.trainable(vec![value; n], shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl_params!(Conv2d { weight, bias });

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }
    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }
    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(spec: ConvSpec, init: &mut Init) -> Result<Self> {
        let cin_g = spec.in_channels / spec.groups;
        let fan_in = (cin_g * spec.kernel * spec.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = init.uniform(
            &[spec.out_channels, cin_g, spec.kernel, spec.kernel],
            bound,
        )?;
        let bias = if spec.bias {
            Some(init.uniform(&[spec.out_channels], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    /// All-zero convolution: contributes nothing until trained.
    pub fn zeros(spec: ConvSpec, init: &Init) -> Result<Self> {
        let cin_g = spec.in_channels / spec.groups;
        let weight = init.constant(
            &[spec.out_channels, cin_g, spec.kernel, spec.kernel],
            0.0,
        )?;
        let bias = if spec.bias {
            Some(init.constant(&[spec.out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.groups == 1 && self.stride == 1 {
            dense_conv2d(x, &self.weight, self.stride, self.padding)?
        } else if self.groups == self.in_channels() && self.out_channels() == self.groups {
            depthwise_conv2d(x, &self.weight, self.stride, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Dense convolution as im2col followed by one matrix product. Its backward
/// pass is a few matmuls, far cheaper on CPU than candle's native conv gradient.
pub fn dense_conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, k, _) = weight.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv expects {ci} input channels, got {:?}",
            x.dims()
        )));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let cols = if k == 1 && padding == 0 {
        let x = if stride == 1 { x.clone() } else { subsample(x, stride)? };
        x.reshape((n, c, oh * ow))?
    } else {
        let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
        let mut taps = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                let tap = xp.narrow(2, dy, (oh - 1) * stride + 1)?.narrow(3, dx, (ow - 1) * stride + 1)?;
                taps.push(if stride == 1 { tap } else { subsample(&tap, stride)? });
            }
        }
        // [N, C, k·k, oh, ow] matches the weight's (C, ky, kx) flattening.
        Tensor::stack(&taps, 2)?.reshape((n, c * k * k, oh * ow))?
    };
    let y = weight.reshape((co, ci * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((n, co, oh, ow))?)
}

/// Per-channel convolution as a sum of shifted, scaled copies of the input.
/// Cheaper than candle's grouped path, which splits into one conv per channel.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_n, c, h, w) = x.dims4()?;
    let k = weight.dim(2)?;
    let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
    let out_h = h + 2 * padding - k + 1;
    let out_w = w + 2 * padding - k + 1;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let tap = weight.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, c, 1, 1))?;
            let shifted = xp.narrow(2, dy, out_h)?.narrow(3, dx, out_w)?;
            let term = shifted.broadcast_mul(&tap)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    let y = acc.ok_or_else(|| Error::Shape("empty depthwise kernel".into()))?;
    if stride == 1 {
        return Ok(y);
    }
    subsample(&y, stride)
}

/// Keep every `stride`-th row and column starting at index 0.
pub fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let x = x
        .pad_with_zeros(2, 0, oh * stride - h)?
        .pad_with_zeros(3, 0, ow * stride - w)?;
    let x = x.reshape((n, c, oh, stride, ow, stride))?;
    Ok(x.narrow(3, 0, 1)?.narrow(5, 0, 1)?.reshape((n, c, oh, ow))?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl_params!(Linear { weight, bias });

impl Linear {
    pub fn new(input: usize, output: usize, bias: bool, init: &mut Init) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = init.uniform(&[output, input], bound)?;
        let bias = if bias {
            Some(init.uniform(&[output], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize, bias_value: f64, init: &Init) -> Result<Self> {
        Ok(Self {
            weight: init.constant(&[output, input], 0.0)?,
            bias: Some(init.constant(&[output], bias_value)?),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last axis of `x` (any rank ≥ 2).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl_params!(GroupNorm { weight, bias });

/// Largest divisor of `channels` that does not exceed `requested`.
pub fn group_count(channels: usize, requested: usize) -> usize {
    (1..=requested.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize, requested_groups: usize, init: &Init) -> Result<Self> {
        Ok(Self {
            weight: init.constant(&[channels], 1.0)?,
            bias: init.constant(&[channels], 0.0)?,
            groups: group_count(channels, requested_groups),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((n, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl_params!(LayerNorm { weight, bias });

impl LayerNorm {
    pub fn new(dim: usize, init: &Init) -> Result<Self> {
        Ok(Self {
            weight: init.constant(&[dim], 1.0)?,
            bias: init.constant(&[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// `[N, C, H, W]` → `[N, H·W, C]`
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[N, H·W, C]` → `[N, C, H, W]`
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matches_native_conv() -> Result<()> {
        let mut init = Init::new(3, &Device::Cpu, DType::F64);
        for (k, stride, h) in [(1, 1, 6), (1, 2, 6), (3, 1, 7), (3, 2, 8), (5, 4, 16), (3, 2, 5)] {
            let x = init.normal(&[2, 3, h, h + 1], 1.0)?;
            let w = init.normal(&[4, 3, k, k], 1.0)?;
            let ours = dense_conv2d(&x, &w, stride, k / 2)?;
            let native = x.conv2d(&w, k / 2, stride, 1, 1)?;
            assert_eq!(ours.dims(), native.dims());
            let diff = (ours - native)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(diff < 1e-12, "k={k} stride={stride}: {diff}");
        }
        Ok(())
    }

    #[test]
    fn depthwise_matches_grouped_conv() -> Result<()> {
        let mut init = Init::new(3, &Device::Cpu, DType::F64);
        let x = init.normal(&[2, 5, 7, 6], 1.0)?;
        let w = init.normal(&[5, 1, 3, 3], 1.0)?;
        for stride in [1, 2] {
            let fast = depthwise_conv2d(&x, &w, stride, 1)?;
            let slow = x.conv2d(&w, 1, stride, 1, 5)?;
            assert_eq!(fast.dims(), slow.dims());
            let diff = (fast - slow)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(diff < 1e-12, "stride {stride}: {diff}");
        }
        Ok(())
    }

    #[test]
    fn group_count_falls_back_to_divisor() {
        assert_eq!(group_count(64, 8), 8);
        assert_eq!(group_count(224, 32), 32);
        assert_eq!(group_count(11, 8), 1);
        assert_eq!(group_count(22, 8), 2);
        assert_eq!(group_count(45, 8), 5);
    }

    #[test]
    fn freeze_and_copy_preserve_values() -> Result<()> {
        let mut init = Init::cpu(1);
        let conv = Conv2d::new(ConvSpec::new(3, 4, 3), &mut init)?;
        assert_eq!(trainable_count(&conv), 3 * 4 * 9 + 4);
        let frozen = frozen_copy(&conv)?;
        assert_eq!(trainable_count(&frozen), 0);
        assert_eq!(weight_hash(&conv)?, weight_hash(&frozen)?);
        Ok(())
    }

    #[test]
    fn subsample_picks_even_positions() -> Result<()> {
        let x = Tensor::arange(0f32, 16f32, &Device::Cpu)?.reshape((1, 1, 4, 4))?;
        let y = subsample(&x, 2)?.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(y, vec![0.0, 2.0, 8.0, 10.0]);
        Ok(())
    }
}
