use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::config::{Depth, ModuleKind};
use crate::backbone::unet::UNetModel;
use crate::error::{Error, Result};
use crate::nn::Init;

use super::annealed::SlotState;
use super::replacements::ReplaceCtx;
use super::schedule::AnnealingSchedule;

/// Which module kinds get replaced at which depths, plus the channel keep
/// ratio for the U-Net width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningPlan {
    pub resblock_depths: BTreeSet<Depth>,
    pub self_attention_depths: BTreeSet<Depth>,
    pub cross_attention_depths: BTreeSet<Depth>,
    pub ffn_depths: BTreeSet<Depth>,
    pub channel_ratio: f64,
}

impl Default for PruningPlan {
    fn default() -> Self {
        use Depth::*;
        Self {
            resblock_depths: [III, IV].into(),
            self_attention_depths: [IV].into(),
            cross_attention_depths: [I, II, III, IV].into(),
            ffn_depths: [III, IV].into(),
            channel_ratio: 0.7,
        }
    }
}

impl PruningPlan {
    /// No module replacement, full width.
    pub fn empty() -> Self {
        Self {
            resblock_depths: BTreeSet::new(),
            self_attention_depths: BTreeSet::new(),
            cross_attention_depths: BTreeSet::new(),
            ffn_depths: BTreeSet::new(),
            channel_ratio: 1.0,
        }
    }

    pub fn depths(&self, kind: ModuleKind) -> &BTreeSet<Depth> {
        match kind {
            ModuleKind::Resblock => &self.resblock_depths,
            ModuleKind::SelfAttention => &self.self_attention_depths,
            ModuleKind::CrossAttention => &self.cross_attention_depths,
            ModuleKind::Ffn => &self.ffn_depths,
        }
    }

    pub fn depths_mut(&mut self, kind: ModuleKind) -> &mut BTreeSet<Depth> {
        match kind {
            ModuleKind::Resblock => &mut self.resblock_depths,
            ModuleKind::SelfAttention => &mut self.self_attention_depths,
            ModuleKind::CrossAttention => &mut self.cross_attention_depths,
            ModuleKind::Ffn => &mut self.ffn_depths,
        }
    }

    pub fn contains(&self, kind: ModuleKind, depth: Depth) -> bool {
        self.depths(kind).contains(&depth)
    }

    pub fn is_module_empty(&self) -> bool {
        ModuleKind::ALL.iter().all(|k| self.depths(*k).is_empty())
    }

    /// `(kind, depth)` pairs in a stable order.
    pub fn entries(&self) -> Vec<(ModuleKind, Depth)> {
        ModuleKind::ALL
            .iter()
            .flat_map(|k| self.depths(*k).iter().map(move |d| (*k, *d)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channel_ratio > 0.0 && self.channel_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "pruning.channel_ratio must be in (0, 1], got {}",
                self.channel_ratio
            )));
        }
        Ok(())
    }
}

/// Wrap every module selected by `plan` in an annealed pair sharing one
/// schedule of `total_steps` steps. Errors if the plan names a (kind, depth)
/// combination the model does not contain.
pub fn apply_plan(
    model: &mut UNetModel,
    plan: &PruningPlan,
    total_steps: u64,
    init: &mut Init,
) -> Result<Arc<AnnealingSchedule>> {
    plan.validate()?;
    let map = model.label_depths();
    for (kind, depth) in plan.entries() {
        if map.count(kind, depth) == 0 {
            return Err(Error::PlanMismatch {
                kind: kind.to_string(),
                depth: depth.to_string(),
            });
        }
    }
    let schedule = Arc::new(AnnealingSchedule::new(total_steps)?);
    let temb = model.timestep_embedding()?;
    let ctx = ReplaceCtx {
        temb: &temb,
        groups: model.config.norm_groups,
    };
    model.for_each_slot_mut(&mut |_, entry, slot| {
        if plan.contains(entry.kind, entry.depth) && slot.state() == SlotState::Plain {
            slot.wrap(entry.kind, &schedule, &ctx, init)?;
        }
        Ok(())
    })?;
    model.schedule = Some(Arc::clone(&schedule));
    Ok(schedule)
}

/// Ids of annealed pairs whose schedule has not reached `T`.
pub fn incomplete_pairs(model: &UNetModel) -> Vec<String> {
    let mut out = Vec::new();
    model.for_each_slot(&mut |id, _, slot| {
        if let Some(s) = slot.schedule() {
            if !s.is_complete() {
                out.push(format!("{id} (step {}/{})", s.step(), s.total()));
            }
        }
    });
    out
}

/// Collapse every completed pair to its replacement and drop the originals.
pub fn finalize(model: &mut UNetModel) -> Result<()> {
    let pending = incomplete_pairs(model);
    if !pending.is_empty() {
        return Err(Error::AnnealingIncomplete(pending));
    }
    model.for_each_slot_mut(&mut |_, _, slot| slot.finalize())?;
    model.schedule = None;
    Ok(())
}

/// Count of slots per state, for reporting.
pub fn slot_states(model: &UNetModel) -> (usize, usize, usize) {
    let (mut plain, mut annealed, mut replaced) = (0, 0, 0);
    model.for_each_slot(&mut |_, _, slot| match slot.state() {
        SlotState::Plain => plain += 1,
        SlotState::Annealed => annealed += 1,
        SlotState::Replaced => replaced += 1,
    });
    (plain, annealed, replaced)
}
