use serde::{Deserialize, Serialize};

use super::{Float, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub step: u64,
}

impl<T: Float> OptimState<T> {
    pub fn new(params: &Parameters<T>, config: AdamWConfig) -> Self {
        OptimState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step<T: Float>(params: &mut Parameters<T>, grads: &Parameters<T>, state: &mut OptimState<T>) {
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let lr = T::of(c.lr);
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let decay = T::one() - T::of(c.lr * c.weight_decay);
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let eps = T::of(c.eps);
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        for (((pi, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi = *pi * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
