//! Adam with global gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet3d::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is rescaled to when exceeded; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state. Moments exist for every parameter; a parameter that gets
/// no gradient in a step is left untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: ParameterSet,
    pub v: ParameterSet,
    /// Number of updates applied so far.
    pub t: u64,
}

fn zeros_like(params: &ParameterSet) -> ParameterSet {
    let mut out = ParameterSet::new();
    for (name, t) in params.iter() {
        out.insert(name.clone(), Tensor::zeros(t.shape()));
    }
    out
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParameterSet) -> Self {
        Self { cfg, m: zeros_like(params), v: zeros_like(params), t: 0 }
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor<f32>>) -> Result<f64> {
        let norm = grads.values().flat_map(|g| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step: self.t });
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.get_mut(name).expect("moments mirror params");
            let v = self.v.get_mut(name).expect("moments mirror params");
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let g = g as f64 * scale;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                *p = (*p as f64 - lr * (mn / bc1) / ((vn / bc2).sqrt() + eps)) as f32;
            }
        }
        Ok(norm)
    }
}
