//! Ablation sweeps over pruning locations and channel ratios at toy scale.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{compute_report, describe};
use crate::backbone::{Depth, ModuleKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lite_ed::resize_bicubic;
use crate::pipeline::PocketSr;
use crate::pruning::PruningPlan;
use crate::training::degrade::degrade;
use crate::training::losses::{Perceptual, RandomConvPerceptual};
use crate::training::{train_stage1, train_stage2, ImageDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTarget {
    Module(ModuleKind),
    ChannelRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Depths at which the target module kind is replaced.
    Depths(BTreeSet<Depth>),
    /// Fraction of channels removed, with or without feature distillation.
    Ratio { pruned: f64, distill: bool },
}

impl Arm {
    pub fn label(&self) -> String {
        match self {
            Arm::Depths(d) if d.is_empty() => "None".into(),
            Arm::Depths(d) => d.iter().map(Depth::to_string).collect::<Vec<_>>().join("+"),
            Arm::Ratio { pruned, distill } => format!(
                "{:.0}% {}",
                pruned * 100.0,
                if *distill { "w/ distill" } else { "w/o distill" }
            ),
        }
    }

    fn is_baseline(&self) -> bool {
        match self {
            Arm::Depths(d) => d.is_empty(),
            Arm::Ratio { pruned, .. } => *pruned == 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub target: SweepTarget,
    pub arms: Vec<Arm>,
    /// Training steps per arm and phase.
    pub budget: u64,
}

impl SweepSpec {
    /// None, IV, III+IV, II+III+IV, I–IV for one module kind.
    pub fn depth_sweep(kind: ModuleKind, budget: u64) -> Self {
        let arms = (0..=4)
            .map(|n| Arm::Depths(Depth::ALL[4 - n..].iter().copied().collect()))
            .collect();
        Self {
            target: SweepTarget::Module(kind),
            arms,
            budget,
        }
    }

    /// Pruned fraction 0%–50% in 10% steps, each with and without distillation.
    pub fn channel_sweep(budget: u64) -> Self {
        let arms = [true, false]
            .into_iter()
            .flat_map(|distill| {
                (0..=5).map(move |i| Arm::Ratio {
                    pruned: i as f64 / 10.0,
                    distill,
                })
            })
            .collect();
        Self {
            target: SweepTarget::ChannelRatio,
            arms,
            budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("sweep budget must be positive".into()));
        }
        for (i, a) in self.arms.iter().enumerate() {
            let ok = matches!(
                (self.target, a),
                (SweepTarget::Module(_), Arm::Depths(_)) | (SweepTarget::ChannelRatio, Arm::Ratio { .. })
            );
            if !ok {
                return Err(Error::Config(format!("arm `{}` does not fit the sweep target", a.label())));
            }
            if let Arm::Ratio { pruned, .. } = a {
                if !(0.0..1.0).contains(pruned) {
                    return Err(Error::Config(format!("pruned fraction {pruned} is outside [0, 1)")));
                }
            }
            if self.arms[..i].contains(a) {
                return Err(Error::Config(format!("duplicate arm `{}`", a.label())));
            }
        }
        if !self.arms.iter().any(Arm::is_baseline) {
            return Err(Error::Config("a sweep must include the unpruned baseline arm".into()));
        }
        Ok(())
    }

    /// The pruning plan and distillation switch an arm trains with.
    pub fn arm_plan(&self, arm: &Arm, base: &RunConfig) -> (PruningPlan, bool) {
        match (self.target, arm) {
            (SweepTarget::Module(kind), Arm::Depths(depths)) => {
                let mut plan = PruningPlan::empty();
                *plan.depths_mut(kind) = depths.clone();
                (plan, base.distill.enabled)
            }
            (_, Arm::Ratio { pruned, distill }) => {
                let plan = PruningPlan {
                    channel_ratio: 1.0 - pruned,
                    ..PruningPlan::empty()
                };
                (plan, *distill)
            }
            (SweepTarget::ChannelRatio, Arm::Depths(_)) => (PruningPlan::empty(), base.distill.enabled),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: String,
    pub params: u64,
    pub macs: u64,
    pub mse: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub target: SweepTarget,
    pub input_size: (usize, usize),
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.arm.len()).max().unwrap_or(3).max(3);
        let mut out = format!(
            "{:<w$}  {:>12}  {:>14}  {:>10}  {:>10}\n",
            "arm", "params", "MACs", "MSE", "percept."
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$}  {:>12}  {:>14}  {:>10.6}  {:>10.6}",
                r.arm, r.params, r.macs, r.mse, r.perceptual
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,params,macs,mse,perceptual\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.arm, r.params, r.macs, r.mse, r.perceptual);
        }
        out
    }
}

/// Analytic params and MACs of one arm at the training crop size.
pub fn arm_compute(spec: &SweepSpec, arm: &Arm, base: &RunConfig) -> Result<(u64, u64)> {
    let (plan, _) = spec.arm_plan(arm, base);
    let crop = base.train.crop_size;
    let report = compute_report(&arm.label(), &describe(&base.model, Some(&plan), (crop, crop))?)?;
    Ok((report.totals.params, report.totals.macs))
}

/// Fixed validation pairs (HR, upsampled degraded input) drawn from a stream
/// the training loops never use.
fn validation_set(base: &RunConfig, dataset: &ImageDataset, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    rng.set_stream(0x5EE9);
    let crop = base.train.crop_size;
    let hr = dataset.sample_batch(&mut rng, 4, crop, 8 * base.model.scale, device)?;
    let lr = degrade(&hr, &base.degrade, u64::MAX / 2)?;
    Ok((hr, resize_bicubic(&lr, crop, crop, false)?))
}

/// Pixel MSE and perceptual-proxy distance of `model` on the validation pairs.
pub fn evaluate(model: &PocketSr, hr: &Tensor, up: &Tensor) -> Result<(f64, f64)> {
    let sr = model.forward(up)?;
    let mse = (&sr - hr)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let perceptual = RandomConvPerceptual::new(hr.device(), hr.dtype())?
        .distance(&sr, hr)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok((mse, perceptual))
}

/// Train a stage-1 teacher once, then run stage 2 per arm and evaluate.
/// Every arm shares the teacher, the seed and the validation pairs.
pub fn sweep(
    spec: &SweepSpec,
    base: &RunConfig,
    dataset: &ImageDataset,
    device: &Device,
    log_dir: Option<&Path>,
) -> Result<SweepTable> {
    spec.validate()?;
    base.validate()?;
    let mut run = base.clone();
    run.train.steps_stage1 = spec.budget;
    run.train.steps_channel = spec.budget;
    run.train.steps_anneal = spec.budget;
    let teacher = train_stage1(&run, dataset, device, log_dir.map(|d| d.join("teacher.jsonl")).as_deref())?.model;
    let (hr, up) = validation_set(base, dataset, device)?;
    let mut rows = Vec::with_capacity(spec.arms.len());
    for (i, arm) in spec.arms.iter().enumerate() {
        let (plan, distill) = spec.arm_plan(arm, base);
        let (params, macs) = arm_compute(spec, arm, base)?;
        let mut arm_run = run.clone();
        arm_run.prune = plan;
        arm_run.distill.enabled = distill;
        let log = log_dir.map(|d| d.join(format!("arm{i}.jsonl")));
        let out = train_stage2(&arm_run, &teacher, dataset, device, log.as_deref())?;
        let (mse, perceptual) = evaluate(&out.student, &hr, &up)?;
        log::info!("sweep arm {}: mse {mse:.6} perceptual {perceptual:.6}", arm.label());
        rows.push(SweepRow {
            arm: arm.label(),
            params,
            macs,
            mse,
            perceptual,
        });
    }
    let crop = base.train.crop_size;
    Ok(SweepTable {
        target: spec.target,
        input_size: (crop, crop),
        seed: base.seed,
        rows,
    })
}
