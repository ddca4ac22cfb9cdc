use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One bias-corrected Adam update of `params` in place.
///
/// Fails without touching anything when a gradient is not finite.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam", "length", params.len(), grads.len()));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iteration: state.step as usize,
            reason: format!("non-finite gradient {g}"),
        });
    }
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            states: vec![AdamState::default(); store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::Divergence {
                iteration: self.states.first().map_or(0, |s| s.step as usize),
                reason: format!("non-finite gradient in {}", p.name),
            });
        }
        for (p, s) in store.iter_mut().zip(&mut self.states) {
            optimizer_step(&mut p.value, &p.grad, s, lr, &self.config)?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Constant rate, halved once at `halve_start` and again every
/// `halve_period` iterations after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_start: usize,
    pub halve_period: usize,
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration < self.halve_start {
            return self.initial;
        }
        let halvings = 1 + (iteration - self.halve_start) / self.halve_period.max(1);
        self.initial * 0.5f64.powi(halvings as i32)
    }
}
