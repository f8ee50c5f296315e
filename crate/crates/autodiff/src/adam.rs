use std::collections::BTreeMap;

use crate::param::{ParamId, ParamStore};

/// Adam with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter present in `grads`.
    /// Parameters without a gradient entry keep both value and state.
    pub fn step(&self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f64>>, lr: f64) {
        let prec = store.precision();
        for (&id, g) in grads {
            let p = store.param_mut(id);
            assert_eq!(p.data.len(), g.len(), "gradient length for {}", p.name);
            p.adam.step += 1;
            let t = p.adam.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            for (i, &gi) in g.iter().enumerate() {
                let m = prec.round(self.beta1 * p.adam.m[i] + (1.0 - self.beta1) * gi);
                let v = prec.round(self.beta2 * p.adam.v[i] + (1.0 - self.beta2) * gi * gi);
                p.adam.m[i] = m;
                p.adam.v[i] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                p.data[i] = prec.round(p.data[i] - update);
            }
        }
    }
}

/// Learning rate after `epoch` full epochs of exponential step decay.
pub fn decayed_lr(initial: f64, rate: f64, every: usize, epoch: usize) -> f64 {
    initial * rate.powi((epoch / every.max(1)) as i32)
}
