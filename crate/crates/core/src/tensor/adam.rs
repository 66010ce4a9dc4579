//! Bias-corrected Adam over named parameter groups.

use super::Real;
use crate::error::{ReliefError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ReliefError::invalid(format!("bad Adam settings {self:?}")))
        }
    }
}

/// Moment estimates for every parameter, flattened in group order. Kept in
/// double precision regardless of the network's scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One named slice of parameters paired with its gradient.
pub struct ParamGroupMut<'a, T> {
    pub name: String,
    pub params: &'a mut [T],
    pub grads: &'a [T],
}

/// Applies one Adam update to every group. Gradients are checked for
/// finiteness before anything is modified, so a failed step leaves the
/// parameters and state untouched.
pub fn adam_step<T: Real>(
    groups: &mut [ParamGroupMut<'_, T>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut total = 0;
    for g in groups.iter() {
        if g.params.len() != g.grads.len() {
            return Err(ReliefError::shape(format!(
                "group {}: {} parameters but {} gradients",
                g.name,
                g.params.len(),
                g.grads.len()
            )));
        }
        if let Some(i) = g.grads.iter().position(|v| !v.is_finite()) {
            return Err(ReliefError::NonFinite(format!(
                "gradient of parameter group {} at index {i}",
                g.name
            )));
        }
        total += g.params.len();
    }
    if total != state.len() || state.v.len() != state.m.len() {
        return Err(ReliefError::shape(format!(
            "optimizer state holds {} moments for {total} parameters",
            state.len()
        )));
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut k = 0;
    for g in groups.iter_mut() {
        for (p, &gr) in g.params.iter_mut().zip(g.grads.iter()) {
            let gr = gr.as_f64();
            let m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * gr;
            let v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * gr * gr;
            state.m[k] = m;
            state.v[k] = v;
            let step = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            *p = T::from_f64_lossy(p.as_f64() - step);
            k += 1;
        }
    }
    Ok(())
}
