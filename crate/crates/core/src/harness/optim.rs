use std::f64::consts::PI;

use crate::nn::{Module, Slot};

use super::OptimConfig;

/// Cosine decay from `base` to `floor` over `total` epochs.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch.min(total) as f64 / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * t).cos())
}

/// Adam with decoupled weight decay (applied to weight matrices only).
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    grad_clip: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable tensor of `model` from the matching
    /// tensors of `grads`. Returns the gradient norm before clipping.
    pub fn step<M: Module>(&mut self, model: &mut M, grads: &M, lr: f64) -> f64 {
        let mut flat = Vec::new();
        grads.visit("", &mut |_, slot, a| {
            if slot.trainable() {
                flat.extend(a.iter().copied());
            }
        });
        if self.m.len() != flat.len() {
            self.m = vec![0.0; flat.len()];
            self.v = vec![0.0; flat.len()];
        }
        let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (m, v, eps, wd) = (&mut self.m, &mut self.v, self.eps, self.weight_decay);
        let mut k = 0;
        model.visit_mut("", &mut |_, slot, mut a| {
            if !slot.trainable() {
                return;
            }
            let decay = if slot == Slot::Weight { lr * wd } else { 0.0 };
            for p in a.iter_mut() {
                let g = flat[k] * scale;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= decay * *p + lr * mhat / (vhat.sqrt() + eps);
                k += 1;
            }
        });
        norm
    }
}
