mod support;

use candle_core::DType;
use pocketsr::accounting::{
    compression_report, compute_report, cross_check, describe, measure_latency, Architecture, Op,
};
use pocketsr::backbone::{Depth, ModuleKind};
use pocketsr::pruning::{apply_plan, channel_prune, finalize, PruningPlan};
use pocketsr::{Error, ModelConfig, PocketSr, Result};
use proptest::prelude::*;
use support::*;

fn conv(cin: usize, cout: usize, kernel: usize, groups: usize, input: (usize, usize)) -> Op {
    Op::Conv {
        cin,
        cout,
        kernel,
        stride: 1,
        groups,
        bias: true,
        input,
    }
}

#[test]
fn dense_conv_counts() -> Result<()> {
    let op = conv(4, 64, 3, 1, (64, 64));
    assert_eq!(op.params(), 9 * 4 * 64 + 64);
    assert_eq!(op.params(), 2_368);
    assert_eq!(op.macs()?, 9 * 4 * 64 * 64 * 64);
    assert_eq!(op.macs()?, 9_437_184);
    Ok(())
}

#[test]
fn depthwise_separable_counts() -> Result<()> {
    let hw = (16, 16);
    let depthwise = conv(320, 320, 3, 320, hw);
    let pointwise = conv(320, 320, 1, 1, hw);
    let ds = depthwise.params() + pointwise.params();
    assert_eq!(ds, 9 * 320 + 320 * 320 + 320 + 320);
    assert_eq!(ds, 105_920);
    let dense = conv(320, 320, 3, 1, hw).params();
    assert_eq!(dense, 921_920);
    let ratio = dense as f64 / ds as f64;
    assert!((ratio - 8.7).abs() < 0.05, "ratio {ratio}");
    assert_eq!(
        depthwise.macs()? + pointwise.macs()?,
        (9 * 320 + 320 * 320) * 256
    );
    Ok(())
}

#[test]
fn empty_model_counts_zero() -> Result<()> {
    let arch = Architecture {
        input_size: (64, 64),
        blocks: Vec::new(),
    };
    let r = compute_report("empty", &arch)?;
    assert_eq!((r.totals.params, r.totals.macs), (0, 0));
    Ok(())
}

#[test]
fn unknown_layers_are_an_error() {
    let op = Op::Opaque {
        name: "mystery".into(),
        params: 10,
    };
    assert_eq!(op.params(), 10);
    assert!(matches!(op.macs(), Err(Error::UnsupportedLayer(n)) if n == "mystery"));
}

#[test]
fn totals_are_the_sum_of_rows() -> Result<()> {
    for plan in [None, Some(PruningPlan::default())] {
        let arch = describe(&ModelConfig::full_scale(), plan.as_ref(), (512, 512))?;
        let r = compute_report("r", &arch)?;
        assert_eq!(r.totals.params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.totals.macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        let by_component: u64 = ["encoder", "unet", "decoder"].iter().map(|c| r.component(c).params).sum();
        assert_eq!(by_component, r.totals.params);
    }
    Ok(())
}

#[test]
fn identical_configs_reduce_nothing() -> Result<()> {
    let arch = describe(&ModelConfig::toy(), None, (64, 64))?;
    let a = compute_report("a", &arch)?;
    let report = compression_report(a.clone(), a);
    assert_eq!(report.reductions.len(), 4);
    for r in &report.reductions {
        assert_eq!((r.params_pct, r.macs_pct), (0.0, 0.0), "{}", r.component);
    }
    Ok(())
}

#[test]
fn full_scale_compression_bands() -> Result<()> {
    let cfg = ModelConfig::full_scale();
    let before = compute_report("baseline", &describe(&cfg, None, (512, 512))?)?;
    let after = compute_report("pruned", &describe(&cfg, Some(&PruningPlan::default()), (512, 512))?)?;
    let report = compression_report(before, after);
    let unet = report.reduction("unet").unwrap();
    assert!((unet.params_before as f64 - 866e6).abs() <= 86.6e6);
    assert!((unet.params_after as f64 - 144.2e6).abs() <= 14.42e6);
    assert!((78.0..=88.0).contains(&unet.params_pct), "{}", unet.params_pct);
    let enc = report.reduction("encoder").unwrap();
    assert!(enc.params_before <= 1_000_000 && enc.macs_before <= 10_000_000_000);
    let dec = report.reduction("decoder").unwrap();
    assert!(dec.params_before <= 2_000_000);
    assert!((dec.macs_before as f64 - 70.7e9).abs() <= 0.15 * 70.7e9);
    assert!(report.reduction("total").unwrap().params_after <= 165_000_000);
    let table = report.to_table();
    assert!(table.contains("unet") && table.contains("total"));
    assert_eq!(report.to_csv().lines().count(), 5);
    Ok(())
}

/// `⌈p·C/q⌉` in integers.
fn ceil_ratio(c: usize, (p, q): (usize, usize)) -> usize {
    (p * c).div_ceil(q)
}

#[test]
fn channel_pruning_scales_interior_convs() -> Result<()> {
    let cfg = ModelConfig::full_scale();
    let base = describe(&cfg, None, (512, 512))?;
    for (p, q) in [(1, 2), (7, 10), (3, 4), (9, 10)] {
        let plan = PruningPlan {
            channel_ratio: p as f64 / q as f64,
            ..PruningPlan::empty()
        };
        let pruned = describe(&cfg, Some(&plan), (512, 512))?;
        let mut checked = 0;
        for (b0, b1) in base.blocks.iter().zip(&pruned.blocks) {
            assert_eq!(b0.name, b1.name);
            if b0.kind != "resblock" {
                continue;
            }
            for (l0, l1) in b0.layers.iter().zip(&b1.layers) {
                if let (
                    Op::Conv { cin, cout, kernel: 3, .. },
                    Op::Conv {
                        cin: cin1,
                        cout: cout1,
                        kernel: 3,
                        ..
                    },
                ) = (&l0.op, &l1.op)
                {
                    assert_eq!(*cin1, ceil_ratio(*cin, (p, q)), "{} {}", b0.name, l0.name);
                    assert_eq!(*cout1, ceil_ratio(*cout, (p, q)), "{} {}", b0.name, l0.name);
                    // weight count factor is exactly ⌈ρCin⌉·⌈ρCout⌉ / (Cin·Cout)
                    let w0 = 9 * cin * cout;
                    let w1 = 9 * cin1 * cout1;
                    assert_eq!(w1 * cin * cout, w0 * cin1 * cout1);
                    checked += 1;
                }
            }
        }
        assert!(checked > 40, "only {checked} convs checked");
    }
    Ok(())
}

#[test]
fn macs_do_not_depend_on_weights() -> Result<()> {
    let cfg = ModelConfig::toy();
    let a = PocketSr::new(&cfg, &mut init32(1))?;
    let b = PocketSr::new(&cfg, &mut init32(2))?;
    assert_ne!(pocketsr::nn::weight_hash(&a)?, pocketsr::nn::weight_hash(&b)?);
    let ra = compute_report("m", &describe(&a.config, None, (64, 64))?)?;
    let rb = compute_report("m", &describe(&b.config, None, (64, 64))?)?;
    assert_eq!(ra, rb);
    Ok(())
}

#[test]
fn latency_needs_a_trial() -> Result<()> {
    assert!(measure_latency(0, 0, || Ok(())).is_err());
    let mut calls = 0;
    let ms = measure_latency(1, 2, || {
        calls += 1;
        Ok(())
    })?;
    assert_eq!(calls, 3);
    assert!(ms >= 0.0);
    Ok(())
}

#[test]
fn latency_rows_for_both_models() -> Result<()> {
    let cfg = ModelConfig::toy();
    let model = PocketSr::new(&cfg, &mut init32(0))?;
    let ms = pocketsr::accounting::measure_model_latency(&model, (64, 64), 1, 0)?;
    let before = compute_report("baseline", &describe(&cfg, None, (64, 64))?)?.with_latency(ms);
    let after = compute_report("pruned", &describe(&cfg, Some(&PruningPlan::default()), (64, 64))?)?.with_latency(ms);
    let table = compression_report(before, after).to_table();
    assert!(table.contains("latency baseline") && table.contains("latency pruned"));
    Ok(())
}

fn depth_set(bits: u8) -> std::collections::BTreeSet<Depth> {
    Depth::ALL.iter().copied().filter(|d| bits & (1 << d.index()) != 0).collect()
}

/// Build the model a plan describes: narrowed, wrapped, stepped to the end
/// and finalized.
fn build_pruned(cfg: &ModelConfig, plan: &PruningPlan, seed: u64) -> Result<PocketSr> {
    let mut narrowed = cfg.clone();
    narrowed.unet = channel_prune(&cfg.unet, plan.channel_ratio)?;
    let mut init = init32(seed);
    let mut model = PocketSr::new(&narrowed, &mut init)?;
    let schedule = apply_plan(&mut model.unet, plan, 1, &mut init)?;
    schedule.set_step(1);
    finalize(&mut model.unet)?;
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn toy_config(
    base: usize,
    mults: Vec<usize>,
    blocks: usize,
    head_dim: usize,
    gated: bool,
    asc: bool,
    dfi: bool,
    dfi_channels: usize,
    cap: usize,
    width: f64,
) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.unet.base_channels = base;
    cfg.unet.channel_multipliers = mults;
    cfg.unet.blocks_per_depth = blocks;
    cfg.unet.attention_head_dim = head_dim;
    cfg.unet.ffn_gated = gated;
    cfg.unet.width_ratio = width;
    cfg.use_asc = asc;
    cfg.use_dfi = dfi;
    cfg.encoder.dfi_channels = dfi_channels;
    cfg.unet.injection_channels = dfi_channels;
    cfg.decoder.channel_cap = cap;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn analytic_counts_match_built_models(
        base in prop::sample::select(vec![16usize, 24, 32]),
        mults in prop::collection::vec(1usize..=4, 4),
        blocks in 1usize..=2,
        head_dim in prop::sample::select(vec![4usize, 8]),
        gated: bool,
        asc: bool,
        dfi: bool,
        dfi_channels in prop::sample::select(vec![8usize, 16]),
        cap in prop::sample::select(vec![8usize, 16]),
        width in prop::sample::select(vec![1.0f64, 0.8]),
        plan_bits in prop::collection::vec(0u8..16, 4),
        ratio in prop::sample::select(vec![1.0f64, 0.7]),
        seed in 0u64..1000,
    ) {
        let cfg = toy_config(base, mults, blocks, head_dim, gated, asc, dfi, dfi_channels, cap, width);
        let model = PocketSr::new(&cfg, &mut init32(seed))?;
        let arch = describe(&cfg, None, (64, 64))?;
        cross_check(&model, &arch)?;
        prop_assert_eq!(arch.params(), pocketsr::nn::param_count(&model) as u64);

        let mut plan = PruningPlan::empty();
        for (kind, bits) in ModuleKind::ALL.iter().zip(&plan_bits) {
            *plan.depths_mut(*kind) = depth_set(*bits);
        }
        plan.channel_ratio = ratio;
        let pruned = build_pruned(&cfg, &plan, seed)?;
        let arch = describe(&cfg, Some(&plan), (64, 64))?;
        cross_check(&pruned, &arch)?;
        prop_assert_eq!(arch.params(), pocketsr::nn::param_count(&pruned) as u64);
    }
}

#[test]
fn f64_models_count_the_same() -> Result<()> {
    let cfg = ModelConfig::toy();
    let model = PocketSr::new(&cfg, &mut pocketsr::nn::Init::new(0, &cpu(), DType::F64))?;
    cross_check(&model, &describe(&cfg, None, (64, 64))?)
}
