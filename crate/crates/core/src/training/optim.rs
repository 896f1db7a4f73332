use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};

use crate::error::{Error, Result};

/// AdamW over a fixed set of variables with optional global-norm clipping.
pub struct Optimizer {
    inner: AdamW,
    vars: Vec<Var>,
    clip: Option<f64>,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, clip: Option<f64>) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        let params = ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Backpropagate `loss`, clip and update. Returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = self.clip_gradients(&mut grads)?;
        self.inner.step(&grads)?;
        Ok(norm)
    }

    fn clip_gradients(&self, grads: &mut GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if let Some(max) = self.clip {
            if norm > max && norm.is_finite() {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        Ok(norm)
    }
}
