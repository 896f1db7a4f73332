//! Central finite differences at f64 against autograd.

mod support;

use candle_core::{DType, Tensor};
use pocketsr::distillation::{distill_loss, DistillConfig};
use pocketsr::lite_ed::{cross_normalize_inject, AscMlp, LatentDecoder, LiteDecoder, LiteDecoderConfig, SkipInputs};
use pocketsr::nn::{Conv2d, ConvSpec, Linear};
use pocketsr::pruning::{blend, linear_attention};
use pocketsr::Result;
use support::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

#[test]
fn linear_attention_gradients() -> Result<()> {
    let q = random(&[2, 5, 4], 1, DType::F64)?;
    let k = random(&[2, 6, 4], 2, DType::F64)?;
    let v = random(&[2, 6, 3], 3, DType::F64)?;
    let eq = gradient_error(&q, H, |q| weighted_sum(&linear_attention(q, &k, &v)?, 9))?;
    let ek = gradient_error(&k, H, |k| weighted_sum(&linear_attention(&q, k, &v)?, 9))?;
    let ev = gradient_error(&v, H, |v| weighted_sum(&linear_attention(&q, &k, v)?, 9))?;
    for e in [eq, ek, ev] {
        assert!(e < TOL, "relative error {e}");
    }
    Ok(())
}

#[test]
fn cross_normalize_inject_gradients() -> Result<()> {
    let h = random(&[2, 3, 4, 4], 4, DType::F64)?;
    let c = (random(&[2, 3, 4, 4], 5, DType::F64)? * 2.0)?;
    let alpha = Tensor::new(&[0.7f64], &cpu())?;
    let f = |h: &Tensor, c: &Tensor, a: &Tensor| weighted_sum(&cross_normalize_inject(h, c, a)?, 11);
    assert!(gradient_error(&h, H, |x| f(x, &c, &alpha))? < TOL);
    assert!(gradient_error(&c, H, |x| f(&h, x, &alpha))? < TOL);
    assert!(gradient_error(&alpha, H, |x| f(&h, &c, x))? < TOL);
    Ok(())
}

/// Kappa as a function of the pooled encoder feature, with a non-zero output
/// layer so the check is not vacuous.
#[test]
fn asc_coefficients_gradient() -> Result<()> {
    let mut init = init64(6);
    let mlp = AscMlp {
        fc1: Linear::new(8, 6, true, &mut init)?,
        fc2: Linear::new(6, 4, true, &mut init)?,
    };
    let pooled = random(&[3, 8], 7, DType::F64)?;
    let e = gradient_error(&pooled, H, |x| weighted_sum(&mlp.forward(x)?, 12))?;
    assert!(e < TOL, "relative error {e}");
    Ok(())
}

/// The decoder output as a function of kappa and of one skip source, with the
/// zero-convs moved off zero.
#[test]
fn asc_modulation_gradient() -> Result<()> {
    let mut init = init64(8);
    let cfg = LiteDecoderConfig {
        channel_cap: 8,
        ..LiteDecoderConfig::toy()
    };
    let mut dec = LiteDecoder::new(&cfg, &mut init)?;
    for (i, conv) in dec.skip_convs.iter_mut().enumerate() {
        *conv = Conv2d::new(ConvSpec::new(3, conv.out_channels(), 3), &mut init64(100 + i as u64))?;
    }
    let latent = random(&[1, 4, 2, 2], 9, DType::F64)?;
    let sources: Vec<Tensor> = (0..4)
        .map(|i| random(&[1, 3, 2 << i, 2 << i], 20 + i as u64, DType::F64))
        .collect::<Result<_>>()?;
    let kappa = random(&[1, 4], 10, DType::F64)?;
    let run = |kappa: &Tensor, sources: &[Tensor]| {
        let skips = SkipInputs { sources, kappa };
        weighted_sum(&dec.decode(&latent, Some(&skips))?, 13)
    };
    let ek = gradient_error(&kappa, H, |k| run(k, &sources))?;
    assert!(ek < TOL, "kappa relative error {ek}");
    let es = gradient_error(&sources[1], H, |s| {
        let mut all = sources.clone();
        all[1] = s.clone();
        run(&kappa, &all)
    })?;
    assert!(es < TOL, "skip source relative error {es}");
    Ok(())
}

#[test]
fn distill_loss_gradient() -> Result<()> {
    let mut init = init64(14);
    let config = DistillConfig {
        taps: vec!["down.0".into(), "mid".into()],
        projections: vec![
            Conv2d::new(ConvSpec::new(4, 4, 1), &mut init)?,
            Conv2d::new(ConvSpec::new(4, 6, 1), &mut init)?,
        ],
    };
    let teacher = [random(&[2, 4, 3, 3], 15, DType::F64)?, random(&[2, 6, 3, 3], 16, DType::F64)?];
    let s0 = random(&[2, 4, 3, 3], 17, DType::F64)?;
    let s1 = random(&[2, 4, 3, 3], 18, DType::F64)?;
    let e0 = gradient_error(&s0, H, |x| distill_loss(&teacher, &[x.clone(), s1.clone()], &config))?;
    let e1 = gradient_error(&s1, H, |x| distill_loss(&teacher, &[s0.clone(), x.clone()], &config))?;
    assert!(e0 < TOL && e1 < TOL, "relative errors {e0}, {e1}");
    // the projection weights get their gradient through the same expression
    let w = config.projections[1].weight.clone();
    let ew = gradient_error(&w, H, |w| {
        let mut c = config.clone();
        c.projections[1].weight = w.clone();
        distill_loss(&teacher, &[s0.clone(), s1.clone()], &c)
    })?;
    assert!(ew < TOL, "projection relative error {ew}");
    Ok(())
}

/// The blend's gradient with respect to the replacement branch is `(1 − σ)`
/// times the upstream gradient.
#[test]
fn blend_gradient_scales_with_one_minus_sigma() -> Result<()> {
    let a = random(&[3, 4], 19, DType::F64)?;
    let b = random(&[3, 4], 20, DType::F64)?;
    let upstream = random(&[3, 4], 21, DType::F64)?;
    for sigma in [0.25, 0.5] {
        let e = gradient_error(&b, H, |x| Ok((blend(sigma, &a, x)? * &upstream)?.sum_all()?))?;
        assert!(e < TOL);
        let var = candle_core::Var::from_tensor(&b)?;
        let grads = (blend(sigma, &a, var.as_tensor())? * &upstream)?.sum_all()?.backward()?;
        let g = values(grads.get(var.as_tensor()).expect("gradient"))?;
        for (gi, ui) in g.iter().zip(values(&upstream)?) {
            assert!((gi - (1.0 - sigma) * ui).abs() < 1e-12);
        }
    }
    Ok(())
}
