use std::sync::Arc;

use candle_core::Tensor;

use crate::backbone::blocks::{Block, Cond};
use crate::backbone::config::ModuleKind;
use crate::error::{Error, Result};
use crate::nn::{self, join, Init, Params};

use super::replacements::{Prunable, ReplaceCtx};
use super::schedule::AnnealingSchedule;

/// A frozen original module running in parallel with its trainable
/// replacement; outputs are blended as `σ·M(x) + (1 − σ)·M_P(x)`.
#[derive(Clone)]
pub struct AnnealedPair<O, R> {
    pub original: O,
    pub replacement: R,
    pub schedule: Arc<AnnealingSchedule>,
    pub kind: ModuleKind,
}

impl<O: Params, R: Params> Params for AnnealedPair<O, R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.original.visit(&join(prefix, "original"), f);
        self.replacement.visit(&join(prefix, "replacement"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.original.visit_mut(&join(prefix, "original"), f);
        self.replacement.visit_mut(&join(prefix, "replacement"), f);
    }
}

/// Convex blend of two module outputs. The endpoints return one branch
/// unchanged, so σ = 1 reproduces the original bit for bit.
pub fn blend(sigma: f64, original: &Tensor, replacement: &Tensor) -> Result<Tensor> {
    if original.dims() != replacement.dims() {
        return Err(Error::Shape(format!(
            "original output {:?} and replacement output {:?} differ",
            original.dims(),
            replacement.dims()
        )));
    }
    if sigma >= 1.0 {
        return Ok(original.clone());
    }
    if sigma <= 0.0 {
        return Ok(replacement.clone());
    }
    Ok(((original * sigma)? + (replacement * (1.0 - sigma))?)?)
}

impl<O: Block, R: Block> AnnealedPair<O, R> {
    pub fn sigma(&self) -> f64 {
        self.schedule.sigma()
    }

    pub fn forward_at(&self, sigma: f64, x: &Tensor, cond: &Cond) -> Result<Tensor> {
        if sigma >= 1.0 {
            return self.original.forward(x, cond);
        }
        if sigma <= 0.0 {
            return self.replacement.forward(x, cond);
        }
        let a = self.original.forward(x, cond)?;
        let b = self.replacement.forward(x, cond)?;
        blend(sigma, &a, &b)
    }
}

impl<O: Block, R: Block> Block for AnnealedPair<O, R> {
    fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor> {
        self.forward_at(self.sigma(), x, cond)
    }
}

/// Lifecycle of a prunable position in the network.
#[derive(Clone)]
pub enum Slot<O, R> {
    Plain(O),
    Annealed(AnnealedPair<O, R>),
    Replaced(R),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    Plain,
    Annealed,
    Replaced,
}

impl<O: Params, R: Params> Params for Slot<O, R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Slot::Plain(m) => m.visit(prefix, f),
            Slot::Annealed(p) => p.visit(prefix, f),
            Slot::Replaced(m) => m.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Slot::Plain(m) => m.visit_mut(prefix, f),
            Slot::Annealed(p) => p.visit_mut(prefix, f),
            Slot::Replaced(m) => m.visit_mut(prefix, f),
        }
    }
}

impl<O: Block, R: Block> Block for Slot<O, R> {
    fn forward(&self, x: &Tensor, cond: &Cond) -> Result<Tensor> {
        match self {
            Slot::Plain(m) => m.forward(x, cond),
            Slot::Annealed(p) => p.forward(x, cond),
            Slot::Replaced(m) => m.forward(x, cond),
        }
    }
}

/// Type-erased slot operations used by plan application and finalization.
pub trait SlotControl {
    fn state(&self) -> SlotState;
    fn wrap(
        &mut self,
        kind: ModuleKind,
        schedule: &Arc<AnnealingSchedule>,
        ctx: &ReplaceCtx,
        init: &mut Init,
    ) -> Result<()>;
    /// Collapse to the replacement; refuses while the schedule is running.
    fn finalize(&mut self) -> Result<()>;
    fn schedule(&self) -> Option<&Arc<AnnealingSchedule>>;
    /// Parameter count of the frozen original (0 unless annealed).
    fn original_params(&self) -> usize;
    fn replacement_params(&self) -> usize;
    fn active_params(&self) -> usize;
}

impl<O, R> SlotControl for Slot<O, R>
where
    O: Prunable<Replacement = R>,
    R: Block + Clone,
{
    fn state(&self) -> SlotState {
        match self {
            Slot::Plain(_) => SlotState::Plain,
            Slot::Annealed(_) => SlotState::Annealed,
            Slot::Replaced(_) => SlotState::Replaced,
        }
    }

    fn wrap(
        &mut self,
        kind: ModuleKind,
        schedule: &Arc<AnnealingSchedule>,
        ctx: &ReplaceCtx,
        init: &mut Init,
    ) -> Result<()> {
        let Slot::Plain(original) = self else {
            return Err(Error::InvalidArgument(
                "module is already wrapped or replaced".into(),
            ));
        };
        let replacement = original.replacement(ctx, init)?;
        let original = nn::frozen_copy(original)?;
        *self = Slot::Annealed(AnnealedPair {
            original,
            replacement,
            schedule: Arc::clone(schedule),
            kind,
        });
        Ok(())
    }

    fn finalize(&mut self) -> Result<()> {
        match self {
            Slot::Annealed(pair) => {
                if !pair.schedule.is_complete() {
                    return Err(Error::AnnealingIncomplete(vec![format!(
                        "{} at step {}/{}",
                        pair.kind,
                        pair.schedule.step(),
                        pair.schedule.total()
                    )]));
                }
                *self = Slot::Replaced(pair.replacement.clone());
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn schedule(&self) -> Option<&Arc<AnnealingSchedule>> {
        match self {
            Slot::Annealed(p) => Some(&p.schedule),
            _ => None,
        }
    }

    fn original_params(&self) -> usize {
        match self {
            Slot::Annealed(p) => nn::param_count(&p.original),
            _ => 0,
        }
    }

    fn replacement_params(&self) -> usize {
        match self {
            Slot::Annealed(p) => nn::param_count(&p.replacement),
            Slot::Replaced(r) => nn::param_count(r),
            Slot::Plain(_) => 0,
        }
    }

    fn active_params(&self) -> usize {
        nn::param_count(self)
    }
}
