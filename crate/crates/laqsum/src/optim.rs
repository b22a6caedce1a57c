//! Adam with linear learning-rate warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 500,
        }
    }
}

/// Effective learning rate at `step` (1-based): scales linearly from 0
/// to the peak over the warmup window, constant afterwards.
pub fn effective_lr(cfg: &AdamConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update over all parameters. Parameters with no gradient
/// entry are treated as having a zero gradient (moments still decay).
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut AdamState<S>,
    step: usize,
    cfg: &AdamConfig,
) -> Result<()> {
    if step < 1 {
        return Err(Error::Config("adam step must be >= 1".into()));
    }
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient for parameter {name}"),
                step,
            });
        }
    }
    let lr = S::from_f64(effective_lr(cfg, step));
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let eps = S::from_f64(cfg.eps);
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let zero: Vec<S> = Vec::new();

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let t = params.get_mut(&name)?;
        let n = t.data.len();
        let g = grads.get(&name).map(|g| g.as_slice()).unwrap_or(&zero);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        for i in 0..n {
            let gi = if g.is_empty() { S::zero() } else { g[i] };
            m[i] = b1 * m[i] + (S::one() - b1) * gi;
            v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            t.data[i] = t.data[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
