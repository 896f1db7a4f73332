use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Annealing coefficient: 1 at step 0, falling linearly to 0 at step `total`,
/// and clamped at 0 afterwards.
pub fn sigma(step: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument(
            "annealing needs at least one step (T = 0)".into(),
        ));
    }
    if step >= total {
        return Ok(0.0);
    }
    Ok((total - step) as f64 / total as f64)
}

/// Step counter shared by every annealed pair of a model.
#[derive(Debug)]
pub struct AnnealingSchedule {
    total: u64,
    step: AtomicU64,
}

impl AnnealingSchedule {
    pub fn new(total: u64) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidArgument(
                "annealing needs at least one step (T = 0)".into(),
            ));
        }
        Ok(Self {
            total,
            step: AtomicU64::new(0),
        })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn step(&self) -> u64 {
        self.step.load(Ordering::SeqCst)
    }

    pub fn set_step(&self, step: u64) {
        self.step.store(step, Ordering::SeqCst)
    }

    /// Advance by one optimizer step; returns the new step.
    pub fn advance(&self) -> u64 {
        self.step.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn sigma(&self) -> f64 {
        // total > 0 by construction
        sigma(self.step(), self.total).unwrap_or(0.0)
    }

    pub fn is_complete(&self) -> bool {
        self.step() >= self.total
    }
}
