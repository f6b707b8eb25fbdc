//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::autodiff::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates for one tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of `params` in place.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *w -= lr * weight_decay * *w;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            states: store
                .iter()
                .map(|p| AdamState::new(p.value.numel()))
                .collect(),
        }
    }

    /// Applies the accumulated gradients of `store`. Parameters flagged
    /// without decay skip the decoupled decay term.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let cfg = self.config;
        for (p, state) in store.iter_mut().zip(&mut self.states) {
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            let value = std::sync::Arc::make_mut(&mut p.value);
            adamw_step(value.data_mut(), p.grad.data(), state, &cfg, lr, wd);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Learning rate for zero-based `step`: linear warmup, then cosine decay to `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
