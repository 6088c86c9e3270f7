use std::collections::BTreeMap;

use crate::autograd::{GradStore, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay. Moments are created lazily, zeroed,
/// for each parameter the first time it receives a gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f32>, Vec<f32>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// Frozen parameters are skipped even if a gradient is present.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f32, weight_decay: f32) -> Result<()> {
        let updates: Vec<(ParamId, &Tensor)> = grads.params().filter(|(id, _)| store.get(*id).trainable).collect();
        for (id, g) in &updates {
            let p = store.get(*id);
            if g.shape() != p.value.shape() {
                return Err(Error::dim("adamw_step", p.value.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {} at element {i}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in updates {
            let p = store.get_mut(id);
            let n = g.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.decay { weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}
