use serde::{Deserialize, Serialize};

use super::FusionParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_max_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_max_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: FusionParams,
    pub v: FusionParams,
    pub step: u64,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &FusionParams, config: AdamWConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut FusionParams, max_norm: f64) -> (f64, bool) {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// One AdamW update with decoupled weight decay on weight matrices only.
pub fn adamw_step(params: &mut FusionParams, grads: &FusionParams, state: &mut OptimizerState, lr: f64) -> StepStats {
    let mut g = grads.clone();
    let (grad_norm, clipped) = match state.config.clip_max_norm {
        Some(max) => clip_global_norm(&mut g, max),
        None => (g.squared_norm().sqrt(), false),
    };
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);

    let gv = g.views();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for ((((_, p, decay), gview), (_, m, _)), (_, v, _)) in params.slices_mut().into_iter().zip(gv).zip(ms).zip(vs) {
        for k in 0..p.len() {
            let gk = gview.values[k];
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mhat = m[k] / bias1;
            let vhat = v[k] / bias2;
            if decay {
                p[k] -= lr * c.weight_decay * p[k];
            }
            p[k] -= lr * mhat / (vhat.sqrt() + c.epsilon);
        }
    }
    StepStats { grad_norm, clipped }
}

/// Linear warmup from 0 to `base` over the first `warmup_fraction` of
/// `total` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, base: f64, warmup_fraction: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warmup = (warmup_fraction * total as f64).round() as u64;
    if step < warmup {
        base * step as f64 / warmup as f64
    } else {
        let span = (total - warmup) as f64;
        base * (total - step) as f64 / span
    }
}
