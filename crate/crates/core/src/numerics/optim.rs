use crate::error::{Error, Result};

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First/second moments per parameter (indexed like the store) and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    /// One AdamW update with decoupled weight decay. Frozen parameters are
    /// skipped; a parameter without a gradient buffer is treated as having
    /// a zero gradient. Nothing is mutated if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != store.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("state for {} params, store has {}", self.m.len(), store.len()),
            ));
        }
        for (id, p) in store.iter() {
            if p.frozen {
                continue;
            }
            if self.m[id.index()].len() != p.tensor.numel() {
                return Err(Error::shape("adamw_step", format!("moment shape for `{}`", p.name)));
            }
            if let Some(g) = &p.tensor.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let grad = p.tensor.grad.take();
            let values = p.tensor.data_mut();
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                values[i] -= lr * weight_decay * values[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.tensor.grad = grad;
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
/// Steps past `total` stay at `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
