//! AdamW with decoupled weight decay, linear warmup then linear decay, and
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    /// Optimizer steps over the whole run (epochs × batches per epoch).
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.06,
            total_steps: 1,
        }
    }
}

impl AdamWConfig {
    pub fn warmup_steps(&self) -> u64 {
        // the tolerance absorbs products like 0.06·250 = 15.000000000000002
        (self.warmup_ratio * self.total_steps as f64 - 1e-9).ceil().max(0.0) as u64
    }

    /// Learning rate applied by the update at 0-based `step`.
    ///
    /// Rises linearly from 0 at step 0 to the peak at the end of warmup, then
    /// falls linearly to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.lr * step as f64 / warm as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - warm) as f64;
        self.lr * (self.total_steps - step) as f64 / span
    }
}

/// Moment estimates and step counter for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// Weight decay applies to matrices only; gains, biases and other vectors are exempt.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} invalid", config.lr)));
        }
        if !(0.0..=1.0).contains(&config.warmup_ratio) {
            return Err(Error::Config("warmup ratio must be within [0,1]".into()));
        }
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let decay_mask = store.iter().map(|(_, _, t)| t.ndim() >= 2).collect();
        Ok(AdamW {
            config,
            m,
            v,
            step: 0,
            decay_mask,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Applies one update and returns the learning rate used.
    ///
    /// With `lr = 0` the parameters are left untouched bit for bit.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<f64> {
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let wd = if self.decay_mask[id.index()] {
                c.weight_decay
            } else {
                0.0
            };
            let p = store.update(id);
            for ((x, mi), vi) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *x);
            }
        }
        Ok(lr)
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
///
/// Returns the norm before clipping. Gradients already within the bound are left untouched.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
