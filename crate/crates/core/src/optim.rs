//! Adam with bias correction. Weight decay is applied by the caller as an
//! L2 term added to gradients before step(), so the update rule here stays
//! pure: zero gradient leaves a parameter exactly where it was.

use crate::error::{CoreError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(CoreError::InvalidArg(format!(
                "learning rate {lr} must be > 0"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(CoreError::InvalidArg(format!(
                "betas ({beta1}, {beta2}) must be in [0, 1)"
            )));
        }
        if eps <= 0.0 {
            return Err(CoreError::InvalidArg(format!("eps {eps} must be > 0")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
        })
    }

    pub fn with_defaults(lr: f64) -> Result<Self> {
        Adam::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable entry, consuming store gradients.
    /// Gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for e in store.entries_mut() {
            if !e.trainable {
                e.grad.iter_mut().for_each(|g| *g = 0.0);
                continue;
            }
            let data = e.value.data_mut();
            for i in 0..data.len() {
                let g = e.grad[i];
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                e.grad[i] = 0.0;
            }
            if !e.value.is_finite() {
                return Err(CoreError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

/// Add lambda * value into the gradient of every decaying entry. Entries
/// registered with add_no_decay (gate logits) are skipped.
pub fn apply_weight_decay(store: &mut ParamStore, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for e in store.entries_mut() {
        if !e.trainable || !e.decay {
            continue;
        }
        for (g, v) in e.grad.iter_mut().zip(e.value.data()) {
            *g += lambda * v;
        }
    }
}
