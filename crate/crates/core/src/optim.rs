//! Adam with bias correction and the warmup / inverse-square-root schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of optimizer updates performed.
    pub step: u64,
    /// Per-parameter update counts used for bias correction; a parameter
    /// without gradient in a step is left untouched and keeps its count.
    pub counts: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            counts: vec![0; params.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn numel(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }
}

/// One Adam update. `grads[i]` is the gradient of parameter `i`, or `None`
/// when the loss did not depend on it this step.
///
/// All gradients are validated before any parameter changes.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer sees {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, name, t) in params.iter() {
        if let Some(g) = &grads[id.index()] {
            if g.len() != t.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: t.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{pos}] is {}",
                    g[pos]
                )));
            }
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    for id in params.ids().collect::<Vec<_>>() {
        let i = id.index();
        let Some(g) = &grads[i] else { continue };
        if !params.get(id).requires_grad {
            continue;
        }
        state.counts[i] += 1;
        let t = state.counts[i] as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = params.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Linear warmup to `lr_peak` at `step = warmup`, then inverse-square-root decay.
pub fn lr_schedule(step: u64, warmup: u64, lr_peak: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    lr_peak * (step / warmup).min((warmup / step).sqrt())
}
