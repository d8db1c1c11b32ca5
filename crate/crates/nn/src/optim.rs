//! Adam with optional global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::NnError;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale all gradients so their joint L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(100.0) }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the accumulated gradients, then zero them.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64, NnError> {
        let norm = store.grad_norm();
        if !norm.is_finite() {
            let bad = store
                .iter()
                .find(|(_, e)| e.grads.iter().any(|g| !g.is_finite()))
                .map(|(n, _)| n.to_string())
                .unwrap_or_default();
            return Err(NnError::NonFinite(format!("gradient of {bad}")));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let precision = store.precision();
        for (name, e) in store.iter_mut() {
            let mom = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; e.values.len()], v: vec![0.0; e.values.len()] });
            for i in 0..e.values.len() {
                let g = e.grads[i] * clip;
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                e.values[i] = precision.round(e.values[i] - c.lr * mh / (vh.sqrt() + c.eps));
                e.grads[i] = 0.0;
            }
            if let Some(bad) = e.values.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!("{name}[{bad}] after update")));
            }
        }
        Ok(norm)
    }
}
