use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Strictly positive kernel feature map: `exp(u)` for `u ≤ 0`, `u + 1` for `u > 0`.
pub fn feature_map(u: &Tensor) -> Result<Tensor> {
    let pos = u.relu()?;
    let neg_part = u.neg()?.relu()?.neg()?.exp()?;
    Ok((pos + neg_part)?)
}

/// Kernelized attention with cost linear in sequence length.
///
/// `q: [.., Lq, d]`, `k: [.., Lk, d]`, `v: [.., Lk, dv]` → `[.., Lq, dv]`, where
/// every output row is a convex combination of the rows of `v` with weights
/// `ψ(q_i)·ψ(k_j) / Σ_k ψ(q_i)·ψ(k_k)`.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let rank = q.rank();
    if rank < 2 || k.rank() != rank || v.rank() != rank {
        return Err(Error::Shape(format!(
            "linear attention expects equal-rank inputs of rank >= 2, got {:?}, {:?}, {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let lk = k.dim(D::Minus2)?;
    if lk == 0 {
        return Err(Error::InvalidArgument("linear attention over zero keys".into()));
    }
    if q.dim(D::Minus1)? != k.dim(D::Minus1)? {
        return Err(Error::Shape(format!(
            "query/key feature dims differ: {:?} vs {:?}",
            q.dims(),
            k.dims()
        )));
    }
    if v.dim(D::Minus2)? != lk {
        return Err(Error::Shape(format!(
            "key/value lengths differ: {:?} vs {:?}",
            k.dims(),
            v.dims()
        )));
    }
    let fq = feature_map(q)?;
    let fk = feature_map(k)?;
    let fk_t = fk.transpose(rank - 2, rank - 1)?.contiguous()?;
    let kv = fk_t.matmul(&v.contiguous()?)?;
    let num = fq.matmul(&kv)?;
    let z = fk.sum_keepdim(rank - 2)?;
    let den = fq.matmul(&z.transpose(rank - 2, rank - 1)?.contiguous()?)?;
    Ok(num.broadcast_div(&den)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn feature_map_is_positive_and_continuous() -> Result<()> {
        let u = Tensor::new(&[-30.0f64, -1.0, 0.0, 1e-9, 2.0], &Device::Cpu)?;
        let f = feature_map(&u)?.to_vec1::<f64>()?;
        assert!(f.iter().all(|&x| x > 0.0));
        assert!((f[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(f[2], 1.0);
        assert!((f[3] - 1.0).abs() < 1e-8);
        assert_eq!(f[4], 3.0);
        Ok(())
    }

    #[test]
    fn rejects_empty_keys() {
        let dev = Device::Cpu;
        let q = Tensor::zeros((2, 4), DType::F64, &dev).unwrap();
        let k = Tensor::zeros((0, 4), DType::F64, &dev).unwrap();
        let v = Tensor::zeros((0, 3), DType::F64, &dev).unwrap();
        assert!(linear_attention(&q, &k, &v).is_err());
    }
}
