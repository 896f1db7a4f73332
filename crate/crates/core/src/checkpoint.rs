//! Checkpoint directories: `weights.safetensors` plus a `manifest.toml` with
//! the model config, training step and pruning state.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Init, Params};
use crate::pipeline::{ModelConfig, PocketSr};
use crate::pruning::{self, PruningPlan};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FORMAT: &str = "pocketsr-checkpoint-1";
pub const DISTILL_REDUCTION: &str = "per-tap mean over elements, sum over taps, mean over batch";

/// Prefixes of tensors that only matter for training.
pub const TRAINING_ONLY_PREFIXES: [&str; 2] = ["discriminator.", "distill."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningState {
    None,
    Annealing,
    Finalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub stage: u8,
    pub step: u64,
    pub seed: u64,
    pub grad_clip: f64,
    pub distill_reduction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningSection {
    pub state: PruningState,
    pub plan: PruningPlan,
    pub anneal_step: u64,
    pub anneal_total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub architecture_hash: String,
    pub weight_hash: String,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub pruning: PruningSection,
    pub run: Option<RunConfig>,
}

impl Manifest {
    pub fn new(model: &PocketSr, stage: u8, step: u64, plan: &PruningPlan, run: Option<&RunConfig>) -> Result<Self> {
        let (mut state, anneal_step, anneal_total) = pruning_state(model);
        if stage >= 2 && state == PruningState::None {
            state = PruningState::Finalized;
        }
        Ok(Self {
            format: FORMAT.into(),
            architecture_hash: nn::architecture_hash(model),
            weight_hash: nn::weight_hash(model)?,
            model: ModelSection {
                config: model.config.clone(),
            },
            training: TrainingSection {
                stage,
                step,
                seed: run.map_or(0, |r| r.seed),
                grad_clip: run.map_or(1.0, |r| r.train.grad_clip),
                distill_reduction: DISTILL_REDUCTION.into(),
            },
            pruning: PruningSection {
                state,
                plan: plan.clone(),
                anneal_step,
                anneal_total,
            },
            run: run.cloned(),
        })
    }
}

fn pruning_state(model: &PocketSr) -> (PruningState, u64, u64) {
    if let Some(s) = &model.unet.schedule {
        return (PruningState::Annealing, s.step(), s.total());
    }
    let (_, _, replaced) = pruning::plan::slot_states(&model.unet);
    if replaced > 0 {
        (PruningState::Finalized, 0, 0)
    } else {
        (PruningState::None, 0, 0)
    }
}

/// Save `model` and any named extras (e.g. the discriminator) under `dir`.
pub fn save(dir: &Path, model: &PocketSr, extras: &[(&str, &dyn Params)], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    model.visit("", &mut |name, t| {
        tensors.insert(name.to_string(), t.clone());
    });
    for (prefix, m) in extras {
        m.visit(prefix, &mut |name, t| {
            tensors.insert(name.to_string(), t.clone());
        });
    }
    candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
    let text = toml::to_string(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub struct Loaded {
    pub model: PocketSr,
    pub manifest: Manifest,
    /// Every tensor in the weights file, including training-only extras.
    pub tensors: HashMap<String, Tensor>,
}

/// Rebuild the architecture described by the manifest and load its weights.
pub fn load(dir: &Path, device: &Device) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let tensors = candle_core::safetensors::load(dir.join(WEIGHTS_FILE), device)?;
    let dtype = tensors
        .get("unet.conv_in.weight")
        .map(|t| t.dtype())
        .unwrap_or(DType::F32);
    let mut init = Init::new(0, device, dtype);
    let mut model = PocketSr::new(&manifest.model.config, &mut init)?;
    let p = &manifest.pruning;
    match p.state {
        PruningState::None => {}
        PruningState::Annealing | PruningState::Finalized => {
            let total = p.anneal_total.max(1);
            let schedule = pruning::apply_plan(&mut model.unet, &p.plan, total, &mut init)?;
            if p.state == PruningState::Annealing {
                schedule.set_step(p.anneal_step);
            } else {
                schedule.set_step(total);
                pruning::finalize(&mut model.unet)?;
            }
        }
    }
    nn::load_named(&mut model, "", &tensors)?;
    let arch = nn::architecture_hash(&model);
    if arch != manifest.architecture_hash {
        return Err(Error::Checkpoint(format!(
            "architecture hash mismatch: manifest {}, rebuilt {arch}",
            manifest.architecture_hash
        )));
    }
    Ok(Loaded {
        model,
        manifest,
        tensors,
    })
}

/// Write an inference bundle holding only the surviving model weights.
/// Completed annealing is finalized on the way; stage-1 checkpoints need
/// `allow_unpruned`.
pub fn export(src: &Path, dst: &Path, allow_unpruned: bool, device: &Device) -> Result<Manifest> {
    let Loaded {
        mut model,
        manifest,
        ..
    } = load(src, device)?;
    match manifest.pruning.state {
        PruningState::None if !allow_unpruned => {
            return Err(Error::Checkpoint(
                "checkpoint is not pruned; pass --allow-unpruned to export it anyway".into(),
            ))
        }
        PruningState::Annealing => pruning::finalize(&mut model.unet)?,
        _ => {}
    }
    let mut out = Manifest::new(
        &model,
        manifest.training.stage,
        manifest.training.step,
        &manifest.pruning.plan,
        manifest.run.as_ref(),
    )?;
    out.training = manifest.training.clone();
    save(dst, &model, &[], &out)?;
    Ok(out)
}
