use std::collections::HashMap;

use candle_core::Tensor;

use crate::backbone::config::UNetConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Params};

/// Narrow every U-Net level to `keep_ratio` of its current width.
pub fn channel_prune(config: &UNetConfig, keep_ratio: f64) -> Result<UNetConfig> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "channel keep ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    let mut narrowed = config.clone();
    narrowed.width_ratio = config.width_ratio * keep_ratio;
    narrowed.validate()?;
    Ok(narrowed)
}

/// Leading-index slice of `src` to `shape`. Every dimension of `shape` must be
/// no larger than the source's.
pub fn slice_leading(src: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if src.rank() != shape.len() || src.dims().iter().zip(shape).any(|(s, d)| d > s) {
        return Err(Error::Shape(format!(
            "cannot slice {:?} down to {:?}",
            src.dims(),
            shape
        )));
    }
    let mut out = src.clone();
    for (axis, &len) in shape.iter().enumerate() {
        if out.dim(axis)? != len {
            out = out.narrow(axis, 0, len)?;
        }
    }
    Ok(out.contiguous()?)
}

/// Initialize a narrowed student from a wider teacher by keeping the leading
/// channels of every same-named tensor. Trainability of the student tensors
/// is preserved; returns how many tensors were copied.
pub fn inherit_weights<S: Params + ?Sized, T: Params + ?Sized>(student: &mut S, teacher: &T) -> Result<usize> {
    let source: HashMap<String, Tensor> = nn::named_tensors(teacher).into_iter().collect();
    let mut copied = 0usize;
    let mut failure = None;
    student.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(src) = source.get(name) else { return };
        let trainable = t.is_variable();
        match slice_leading(src, t.dims()).and_then(|s| {
            let s = s.to_dtype(t.dtype())?.to_device(t.device())?;
            if trainable {
                Ok(candle_core::Var::from_tensor(&s)?.as_tensor().clone())
            } else {
                Ok(s.detach())
            }
        }) {
            Ok(v) => {
                *t = v;
                copied += 1;
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(copied),
    }
}
