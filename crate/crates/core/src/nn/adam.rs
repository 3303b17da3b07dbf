//! Adam optimizer with bias correction and a linear-warmup learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8, no weight decay.
    pub fn standard() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// First and second moment accumulators for one parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }
}

/// One Adam update in place. Rejects non-finite gradients before touching
/// either the parameters or the moment buffers, so a failed step leaves the
/// optimizer state exactly as it was.
pub fn adam_step<T: Real>(
    cfg: &AdamConfig,
    state: &mut AdamState<T>,
    params: &mut [T],
    grads: &[T],
    lr: T,
) -> Result<()> {
    if params.len() != state.m.len() || params.len() != grads.len() {
        return Err(Error::DimMismatch {
            what: "optimizer buffers",
            expected: params.len(),
            got: if params.len() != state.m.len() { state.m.len() } else { grads.len() },
        });
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient passed to optimizer".into()));
    }

    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let eps = T::of(cfg.eps);
    let wd = T::of(cfg.weight_decay);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    for i in 0..params.len() {
        let g = if cfg.weight_decay != 0.0 { grads[i] + wd * params[i] } else { grads[i] };
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Linear warmup to `peak` over `warmup` steps, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.peak
        } else {
            self.peak * (((step + 1) as f64) / (self.warmup as f64)).min(1.0)
        }
    }
}
