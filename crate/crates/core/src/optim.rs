//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use mafea_tensor::Tensor;

use crate::config::OptimConfig;
use crate::error::{MafeaError, Result};
use crate::params::ParamStore;

pub type Grads = BTreeMap<String, Tensor>;

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(MafeaError::Numeric(format!("gradient shape mismatch for {name}")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *w);
            }
        }
        Ok(())
    }
}
