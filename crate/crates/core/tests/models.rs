mod support;

use candle_core::{DType, Tensor};
use pocketsr::backbone::{build_unet, UNetConfig};
use pocketsr::distillation::{default_taps, distill_loss, register_taps, DistillConfig};
use pocketsr::lite_ed::{LatentDecoder, LiteDecoder, LiteDecoderConfig, LiteEncoder, LiteEncoderConfig};
use pocketsr::nn::{self, Conv2d, ConvSpec};
use pocketsr::pruning::channel_prune;
use pocketsr::{ModelConfig, PocketSr, Result};
use proptest::prelude::*;
use support::*;

#[test]
fn encoder_shapes_at_full_scale() -> Result<()> {
    let enc = LiteEncoder::new(&LiteEncoderConfig::full_scale(), &mut init32(0))?;
    let out = enc.encode(&random(&[1, 3, 64, 64], 1, DType::F32)?)?;
    assert_eq!(out.latent.dims(), &[1, 4, 8, 8]);
    assert_eq!(out.dfi_feature.dims()[2..], [8, 8]);
    assert_eq!(out.asc_input.dims(), &[1, enc.dfi_channels()]);
    let sizes: Vec<usize> = out.skip_sources.iter().map(|s| s.dims()[2]).collect();
    assert_eq!(sizes, [8, 16, 32, 64]);
    assert!(enc.encode(&random(&[1, 3, 100, 100], 2, DType::F32)?).is_err());
    Ok(())
}

#[test]
fn decoder_width_is_capped() -> Result<()> {
    let dec = LiteDecoder::new(&LiteDecoderConfig::full_scale(), &mut init32(0))?;
    assert!(dec.max_width() <= 64, "{}", dec.max_width());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decoder_upsamples_exactly_eight_times(h in 1usize..6, w in 1usize..6, batch in 1usize..3, seed in 0u64..100) {
        let dec = LiteDecoder::new(&LiteDecoderConfig::toy(), &mut init32(seed))?;
        let z = random(&[batch, 4, h, w], seed, DType::F32)?;
        let out = dec.decode(&z, None)?;
        prop_assert_eq!(out.dims(), &[batch, 3, 8 * h, 8 * w]);
    }
}

#[test]
fn pipeline_preserves_size_and_is_deterministic() -> Result<()> {
    let cfg = ModelConfig::toy();
    let a = PocketSr::new(&cfg, &mut init32(7))?;
    let b = PocketSr::new(&cfg, &mut init32(7))?;
    assert_eq!(nn::weight_hash(&a)?, nn::weight_hash(&b)?);
    let x = random(&[2, 3, 64, 64], 8, DType::F32)?;
    let ya = a.forward(&x)?;
    assert_eq!(ya.dims(), x.dims());
    assert_eq!(max_abs_diff(&ya, &b.forward(&x)?)?, 0.0);
    assert_eq!(max_abs_diff(&ya, &a.forward(&x)?)?, 0.0);
    Ok(())
}

#[test]
fn super_resolve_handles_odd_sizes_and_tiles() -> Result<()> {
    let model = PocketSr::new(&ModelConfig::toy(), &mut init32(9))?;
    let lr = random(&[1, 3, 13, 11], 10, DType::F32)?;
    assert_eq!(model.super_resolve(&lr, 512, 0)?.dims(), &[1, 3, 52, 44]);
    let tiled = model.super_resolve(&lr, 32, 8)?;
    assert_eq!(tiled.dims(), &[1, 3, 52, 44]);
    assert!(values(&tiled)?.iter().all(|v| v.is_finite()));
    Ok(())
}

/// Zero-initialized paths (injection gate, skip zero-convs) start at zero yet
/// still receive gradient.
#[test]
fn zero_initialized_paths_get_gradient() -> Result<()> {
    let model = PocketSr::new(&ModelConfig::toy(), &mut init32(11))?;
    let inj = model.unet.injection.as_ref().expect("dfi enabled in toy");
    assert_eq!(values(&inj.alpha)?, [0.0]);
    let x = random(&[1, 3, 64, 64], 12, DType::F32)?;
    let target = random(&[1, 3, 64, 64], 13, DType::F32)?;
    let loss = (model.forward(&x)? - &target)?.sqr()?.mean_all()?;
    let grads = loss.backward()?;
    let norm = |t: &Tensor| -> Result<f64> {
        let g = grads.get(t).expect("gradient present");
        Ok(values(g)?.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    assert!(norm(&inj.alpha)? > 0.0, "alpha");
    for (i, conv) in model.decoder.skip_convs.iter().enumerate() {
        assert_eq!(values(&conv.weight)?.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert!(norm(&conv.weight)? > 0.0, "skip conv {i}");
    }
    // kappa only scales the zero-conv outputs, so its head sees gradient once
    // those move off zero
    assert_eq!(norm(&model.encoder.asc.fc2.weight)?, 0.0);
    let mut moved = model.clone();
    for (i, conv) in moved.decoder.skip_convs.iter_mut().enumerate() {
        *conv = Conv2d::new(ConvSpec::new(3, conv.out_channels(), 3), &mut init32(30 + i as u64))?;
    }
    let loss = (moved.forward(&x)? - &target)?.sqr()?.mean_all()?;
    let grads = loss.backward()?;
    let g = grads.get(&moved.encoder.asc.fc2.weight).expect("gradient present");
    assert!(values(g)?.iter().any(|v| *v != 0.0), "kappa head");
    Ok(())
}

#[test]
fn timestep_path_is_frozen() -> Result<()> {
    let model = PocketSr::new(&ModelConfig::toy(), &mut init32(14))?;
    let vars = nn::trainable_vars(&model.unet.time_embedding)?;
    assert!(vars.is_empty());
    Ok(())
}

fn toy_pair() -> Result<(pocketsr::backbone::UNetModel, pocketsr::backbone::UNetModel)> {
    let teacher = build_unet(&UNetConfig::toy(), &mut init32(20))?;
    let student = build_unet(&channel_prune(&UNetConfig::toy(), 0.5)?, &mut init32(21))?;
    Ok((teacher, student))
}

#[test]
fn nine_taps_and_matching_projections() -> Result<()> {
    let (teacher, student) = toy_pair()?;
    let cfg = register_taps(&teacher, &student, &default_taps(), &init32(0))?;
    assert_eq!(cfg.taps.len(), 9);
    let z = random(&[1, 4, 8, 8], 1, DType::F32)?;
    let tf = cfg.select(&teacher.forward_features(&z, None)?)?;
    let sf = cfg.select(&student.forward_features(&z, None)?)?;
    assert!(tf.len() == 9 && sf.len() == 9);
    assert!(scalar(&distill_loss(&tf, &sf, &cfg)?)? > 0.0);
    assert!(register_taps(&teacher, &student, &[], &init32(0)).is_err());
    assert!(register_taps(&teacher, &student, &["down.9".into()], &init32(0)).is_err());
    Ok(())
}

fn identity_config(taps: usize, channels: usize) -> Result<DistillConfig> {
    let (teacher, _) = toy_pair()?;
    let names: Vec<String> = ["down.0", "down.1", "mid"][..taps].iter().map(|s| s.to_string()).collect();
    let mut cfg = register_taps(&teacher, &teacher, &names, &init64(0))?;
    for p in &mut cfg.projections {
        let mut w = vec![0.0f64; channels * channels];
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        *p = Conv2d {
            weight: Tensor::from_vec(w, (channels, channels, 1, 1), &cpu())?,
            bias: Some(Tensor::zeros(channels, DType::F64, &cpu())?),
            ..Conv2d::zeros(ConvSpec::new(channels, channels, 1), &init64(0))?
        };
    }
    Ok(cfg)
}

#[test]
fn distill_loss_examples() -> Result<()> {
    let ones = Tensor::ones((1, 2, 2, 2), DType::F64, &cpu())?;
    let zeros = ones.zeros_like()?;
    let cfg = identity_config(1, 2)?;
    assert_eq!(scalar(&distill_loss(&[ones.clone()], &[ones.clone()], &cfg)?)?, 0.0);
    let sqrt2 = (ones.clone() * 2f64.sqrt())?;
    assert!((scalar(&distill_loss(&[sqrt2], &[zeros.clone()], &cfg)?)? - 2.0).abs() < 1e-12);

    let cfg = identity_config(2, 2)?;
    let three = (ones.clone() * 3f64.sqrt())?;
    let two = (ones.clone() * 2f64.sqrt())?;
    let v = scalar(&distill_loss(&[three, two], &[zeros.clone(), zeros.clone()], &cfg)?)?;
    assert!((v - 5.0).abs() < 1e-12, "{v}");
    Ok(())
}

#[test]
fn distill_loss_ignores_tap_order_and_teacher_gradients() -> Result<()> {
    let cfg = identity_config(3, 2)?;
    let t: Vec<Tensor> = (0..3).map(|i| random(&[2, 2, 3, 3], i, DType::F64)).collect::<Result<_>>()?;
    let s: Vec<Tensor> = (0..3).map(|i| random(&[2, 2, 3, 3], 10 + i, DType::F64)).collect::<Result<_>>()?;
    let forward = scalar(&distill_loss(&t, &s, &cfg)?)?;
    let perm = [2, 0, 1];
    let tp: Vec<Tensor> = perm.iter().map(|&i| t[i].clone()).collect();
    let sp: Vec<Tensor> = perm.iter().map(|&i| s[i].clone()).collect();
    assert!((forward - scalar(&distill_loss(&tp, &sp, &cfg)?)?).abs() < 1e-12);

    let tvar = candle_core::Var::from_tensor(&t[0])?;
    let svar = candle_core::Var::from_tensor(&s[0])?;
    let loss = distill_loss(
        &[tvar.as_tensor().clone(), t[1].clone(), t[2].clone()],
        &[svar.as_tensor().clone(), s[1].clone(), s[2].clone()],
        &cfg,
    )?;
    let grads = loss.backward()?;
    assert!(grads.get(tvar.as_tensor()).is_none());
    assert!(grads.get(svar.as_tensor()).is_some());
    Ok(())
}
