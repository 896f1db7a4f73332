mod support;

use std::collections::HashSet;

use candle_core::{DType, Tensor};
use pocketsr::checkpoint::{self, Manifest, PruningState};
use pocketsr::config::RunConfig;
use pocketsr::lite_ed::resize_bicubic;
use pocketsr::nn::{self, Params};
use pocketsr::pruning::PruningPlan;
use pocketsr::training::losses::{discriminator_hinge, generator_hinge};
use pocketsr::training::{
    combine, compose_loss, degrade, read_log, train_stage1, train_stage2, write_synthetic_dataset, DegradationConfig,
    ImageDataset, LossTerms, LossWeights, Optimizer, PatchDiscriminator, Perceptual, RandomConvPerceptual, Stage,
};
use pocketsr::{Error, ModelConfig, PocketSr, Result};
use support::*;

fn s(v: f64) -> Tensor {
    Tensor::new(v, &cpu()).unwrap()
}

#[test]
fn loss_composition_examples() -> Result<()> {
    let w = LossWeights::default();
    let terms = LossTerms {
        mse: s(1.0),
        lpips: s(0.5),
        gan: s(0.0),
        distill: None,
    };
    let (total, values) = combine(&terms, &w, Stage::One)?;
    assert!((scalar(&total)? - 3.0).abs() < 1e-12);
    assert_eq!((values.mse, values.lpips, values.gan, values.distill), (1.0, 0.5, 0.0, None));

    let with_distill = LossTerms {
        distill: Some(s(10.0)),
        ..terms
    };
    let (total, values) = combine(&with_distill, &w, Stage::Two)?;
    assert!((scalar(&total)? - 3.01).abs() < 1e-12);
    assert_eq!(values.distill, Some(10.0));
    assert!(matches!(combine(&with_distill, &w, Stage::One), Err(Error::InvalidArgument(_))));
    Ok(())
}

#[test]
fn loss_is_linear_in_each_component() -> Result<()> {
    let w = LossWeights::default();
    for (mse, lpips, gan, d) in [(0.3, 0.7, -1.2, 4.0), (2.0, 0.0, 0.5, 0.0), (0.0, 0.0, 0.0, 123.0)] {
        let terms = LossTerms {
            mse: s(mse),
            lpips: s(lpips),
            gan: s(gan),
            distill: Some(s(d)),
        };
        let expected = 2.0 * mse + 2.0 * lpips + 0.25 * gan + 0.001 * d;
        assert!((scalar(&combine(&terms, &w, Stage::Two)?.0)? - expected).abs() < 1e-12);
    }
    Ok(())
}

#[test]
fn perfect_reconstruction_costs_nothing() -> Result<()> {
    let p = RandomConvPerceptual::new(&cpu(), DType::F32)?;
    let hr = random(&[2, 3, 32, 32], 1, DType::F32)?;
    let (total, _) = compose_loss(&hr, &hr, &p, None, None, &LossWeights::default(), Stage::One)?;
    assert_eq!(scalar(&total)?, 0.0);
    let other = random(&[2, 3, 16, 16], 2, DType::F32)?;
    assert!(compose_loss(&hr, &other, &p, None, None, &LossWeights::default(), Stage::One).is_err());
    Ok(())
}

#[test]
fn perceptual_proxy_is_zero_on_identity_and_positive_otherwise() -> Result<()> {
    let p = RandomConvPerceptual::new(&cpu(), DType::F32)?;
    let a = random(&[1, 3, 32, 32], 3, DType::F32)?;
    let b = (&a + (random(&[1, 3, 32, 32], 4, DType::F32)? * 0.1)?)?;
    assert_eq!(scalar(&p.distance(&a, &a)?)?, 0.0);
    assert!(scalar(&p.distance(&a, &b)?)? > 0.0);
    assert!(nn::trainable_vars(&p)?.is_empty());
    Ok(())
}

#[test]
fn hinge_examples() -> Result<()> {
    let ones = Tensor::ones((2, 1, 4, 4), DType::F64, &cpu())?;
    let zeros = ones.zeros_like()?;
    assert_eq!(scalar(&discriminator_hinge(&ones, &ones.neg()?)?)?, 0.0);
    assert_eq!(scalar(&generator_hinge(&zeros)?)?, 0.0);
    assert_eq!(scalar(&discriminator_hinge(&zeros, &zeros)?)?, 2.0);
    assert_eq!(scalar(&generator_hinge(&ones)?)?, -1.0);
    Ok(())
}

#[test]
fn patch_discriminator_scores_patches() -> Result<()> {
    let d = PatchDiscriminator::new(8, &mut init32(0))?;
    assert_eq!(d.convs.len(), 4);
    let x = random(&[2, 3, 64, 64], 5, DType::F32)?;
    let out = d.forward(&x)?;
    assert_eq!(out.dims()[..2], [2, 1]);
    assert!(out.dims()[2] > 1);
    Ok(())
}

#[test]
fn degradation_is_deterministic_and_seed_dependent() -> Result<()> {
    let hr = (random(&[1, 3, 64, 64], 6, DType::F32)? * 0.9)?;
    let cfg = DegradationConfig::default();
    let a = degrade(&hr, &cfg, 0)?;
    assert_eq!(a.dims(), &[1, 3, 16, 16]);
    assert_eq!(values(&a)?, values(&degrade(&hr, &cfg, 0)?)?);
    let mut seen = HashSet::new();
    for seed in 0..10 {
        let cfg = DegradationConfig { seed, ..cfg.clone() };
        let bits: Vec<u32> = values(&degrade(&hr, &cfg, 0)?)?.iter().map(|v| (*v as f32).to_bits()).collect();
        assert!(seen.insert(bits), "seed {seed} collides");
    }
    assert!(degrade(&random(&[1, 3, 30, 30], 7, DType::F32)?, &cfg, 0).is_err());
    Ok(())
}

#[test]
fn bicubic_only_degradation_is_plain_downscaling() -> Result<()> {
    let hr = (random(&[1, 3, 64, 64], 8, DType::F32)? * 0.9)?;
    let lr = degrade(&hr, &DegradationConfig::bicubic_only(4), 3)?;
    let reference = resize_bicubic(&hr, 16, 16, true)?;
    assert!(max_abs_diff(&lr, &reference)? < 1e-5);
    Ok(())
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() -> Result<()> {
    let model = PocketSr::new(&ModelConfig::toy(), &mut init32(9))?;
    let before = nn::weight_hash(&model)?;
    let mut opt = Optimizer::new(nn::trainable_vars(&model)?, 0.0, 0.01, Some(1.0))?;
    let x = random(&[1, 3, 64, 64], 10, DType::F32)?;
    let loss = model.forward(&x)?.sqr()?.mean_all()?;
    let norm = opt.backward_step(&loss)?;
    assert!(norm > 0.0);
    assert_eq!(nn::weight_hash(&model)?, before);

    let mut opt = Optimizer::new(nn::trainable_vars(&model)?, 1e-3, 0.0, None)?;
    opt.backward_step(&model.forward(&x)?.sqr()?.mean_all()?)?;
    assert_ne!(nn::weight_hash(&model)?, before);
    assert!(Optimizer::new(Vec::new(), -1.0, 0.0, None).is_err());
    Ok(())
}

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::toy();
    run.train.steps_stage1 = 3;
    run.train.steps_channel = 2;
    run.train.steps_anneal = 3;
    run.train.batch_size = 1;
    run.seed = 5;
    run
}

#[test]
fn short_two_stage_run_end_to_end() -> Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 3, 96, 1)?;
    let dataset = ImageDataset::open(&data)?;
    let run = tiny_run();

    let log1 = dir.path().join("stage1.jsonl");
    let s1 = train_stage1(&run, &dataset, &cpu(), Some(&log1))?;
    let records = read_log(&log1)?;
    assert_eq!(records, s1.records);
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.stage == 1 && r.sigma == 1.0 && r.loss.distill.is_none()));
    let temb = nn::weight_hash(&s1.model.unet.time_embedding)?;
    let fresh = PocketSr::new(&run.model, &mut pocketsr::nn::Init::new(run.seed, &cpu(), DType::F32))?;
    assert_eq!(temb, nn::weight_hash(&fresh.unet.time_embedding)?);

    let log2 = dir.path().join("stage2.jsonl");
    let s2 = train_stage2(&run, &s1.model, &dataset, &cpu(), Some(&log2))?;
    assert!(s2.freeze.holds());
    let sigmas: Vec<f64> = s2.records.iter().filter(|r| r.phase == "anneal").map(|r| r.sigma).collect();
    assert_eq!(sigmas.len(), 3);
    assert_eq!(sigmas[0], 1.0);
    assert!(sigmas.windows(2).all(|w| w[1] <= w[0]));
    assert!(s2.records.iter().all(|r| r.loss.distill.is_some()));
    assert!(nn::param_count(&s2.student) < nn::param_count(&s1.model));
    assert_eq!(read_log(&log2)?.len(), 5);

    // a pruned model is not a valid teacher
    assert!(train_stage2(&run, &s2.student, &dataset, &cpu(), None).is_err());

    let x = random(&[1, 3, 64, 64], 11, DType::F32)?;
    for (name, model, stage) in [("s1", &s1.model, 1), ("s2", &s2.student, 2), ("ann", &s2.annealed, 2)] {
        let ckpt = dir.path().join(name);
        let manifest = Manifest::new(model, stage, 3, &run.prune, Some(&run))?;
        checkpoint::save(&ckpt, model, &[("discriminator", &s1.discriminator as &dyn Params)], &manifest)?;
        let loaded = checkpoint::load(&ckpt, &cpu())?;
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(nn::weight_hash(&loaded.model)?, nn::weight_hash(model)?);
        assert_eq!(max_abs_diff(&loaded.model.forward(&x)?, &model.forward(&x)?)?, 0.0);
        assert!(loaded.tensors.keys().any(|k| k.starts_with("discriminator.")));
    }
    assert_eq!(checkpoint::read_manifest(&dir.path().join("s1"))?.pruning.state, PruningState::None);
    assert_eq!(checkpoint::read_manifest(&dir.path().join("ann"))?.pruning.state, PruningState::Annealing);
    assert_eq!(checkpoint::read_manifest(&dir.path().join("s2"))?.pruning.state, PruningState::Finalized);

    let out = dir.path().join("export");
    assert!(checkpoint::export(&dir.path().join("s1"), &out, false, &cpu()).is_err());
    let m = checkpoint::export(&dir.path().join("ann"), &out, false, &cpu())?;
    assert_eq!(m.pruning.state, PruningState::Finalized);
    let exported = checkpoint::load(&out, &cpu())?;
    assert!(exported.tensors.keys().all(|k| !k.starts_with("discriminator.")));
    assert!(max_abs_diff(&exported.model.forward(&x)?, &s2.student.forward(&x)?)? < 1e-6);
    Ok(())
}

#[test]
fn stage2_rejects_a_plan_that_does_not_fit() -> Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    write_synthetic_dataset(dir.path(), 1, 64, 2)?;
    let dataset = ImageDataset::open(dir.path())?;
    let mut run = tiny_run();
    let teacher = PocketSr::new(&run.model, &mut init32(0))?;
    run.prune = PruningPlan {
        channel_ratio: 0.1,
        ..PruningPlan::default()
    };
    assert!(train_stage2(&run, &teacher, &dataset, &cpu(), None).is_err());
    assert!(ImageDataset::open(&dir.path().join("missing")).is_err());
    Ok(())
}
