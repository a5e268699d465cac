use std::f64::consts::PI;

use super::TrainConfig;
use crate::numerics::{ParamStore, Real};

/// `base · ½(1 + cos(π·step/total))`, no warmup; steps past the end clamp.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    let total = total_steps.max(1);
    let s = step.min(total) as f64;
    base * 0.5 * (1.0 + (PI * s / total as f64).cos())
}

/// AdamW with decoupled weight decay, optional global-norm clipping.
/// Moments are created lazily for parameters that become trainable.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every trainable parameter from its accumulated gradient
    /// multiplied by `grad_scale`. Frozen parameters are never written.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64, grad_scale: f64) {
        let ids = store.trainable_ids();
        let sq: f64 = ids
            .iter()
            .filter_map(|&id| store.get(id).grad.as_ref())
            .flat_map(|g| g.iter().map(|v| (v.as_f64() * grad_scale).powi(2)))
            .sum();
        let norm = sq.sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let scale = grad_scale * clip;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for id in ids {
            let t = store.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            let n = grad.len();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[k].as_f64() * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                let w = p.as_f64();
                *p = T::of(w - lr * (update + self.weight_decay * w));
            }
        }
    }
}
