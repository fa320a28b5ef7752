//! AdamW with decoupled weight decay, plus cosine learning-rate annealing.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// AdamW hyperparameters. Defaults: β1 = 0.9, β2 = 0.95, ε = 1e-8, weight decay 0.05.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Optimizer state: per-parameter moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.first
            .iter()
            .map(|(k, m)| (k.as_str(), m, &self.second[k]))
    }

    /// Rebuilds a state from checkpointed pieces.
    pub fn from_parts(
        config: AdamWConfig,
        step: u64,
        moments: impl IntoIterator<Item = (String, Tensor, Tensor)>,
    ) -> Self {
        let mut s = Self::new(config);
        s.step = step;
        for (k, m, v) in moments {
            s.first.insert(k.clone(), m);
            s.second.insert(k, v);
        }
        s
    }

    /// One AdamW update at learning rate `lr` on every parameter.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let grad = params
                .grad(&name)
                .cloned()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let p = params.get_mut(&name)?;
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *pi *= 1.0 - lr * c.weight_decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("adamw_step"));
            }
        }
        Ok(())
    }

    /// One AdamW update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_with_lr(params, self.config.lr)
    }
}

/// `lr(s) = lr0 · ½(1 + cos(π s / S))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * frac).cos())
}
