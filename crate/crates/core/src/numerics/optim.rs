use std::f64::consts::PI;

use super::{NumericsError, ParamStore, Tensor};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> OptimizerState {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay, using the
/// gradients accumulated in `store`.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<(), NumericsError> {
    if state.m.len() != store.len() {
        return Err(NumericsError::Shape(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        if store.grad(id).data().iter().any(|g| !g.is_finite()) {
            return Err(NumericsError::NanGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for id in store.ids().collect::<Vec<_>>() {
        let i = id.index();
        let (value, grad) = store.value_and_grad_mut(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warm-up to `lr_max`, then cosine decay down to `lr_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, lr_min: f64, lr_max: f64, total_steps: u64) -> Result<LrSchedule, NumericsError> {
        if !(lr_min > 0.0 && lr_min <= lr_max) {
            return Err(NumericsError::Config(format!(
                "learning-rate range ({lr_min}, {lr_max}) must satisfy 0 < min <= max"
            )));
        }
        if warmup_steps >= total_steps {
            return Err(NumericsError::Config(format!(
                "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
            )));
        }
        Ok(LrSchedule {
            warmup_steps,
            lr_min,
            lr_max,
            total_steps,
        })
    }
}

pub fn lr_at_step(schedule: &LrSchedule, step: u64) -> f64 {
    let LrSchedule {
        warmup_steps,
        lr_min,
        lr_max,
        total_steps,
    } = *schedule;
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return lr_min;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    lr_min + (lr_max - lr_min) * (1.0 + (PI * progress).cos()) / 2.0
}

pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .ids()
        .map(|id| store.grad(id).sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when no clipping happened).
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for id in store.ids().collect::<Vec<_>>() {
        store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    scale
}
