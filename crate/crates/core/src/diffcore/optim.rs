use serde::{Deserialize, Serialize};

use super::params::{GradientTape, ParameterSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Decay of the squared-gradient running average.
    pub alpha: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
            clip_norm: Some(10.0),
        }
    }
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1.0 when no clipping happened).
    pub clip_scale: f64,
}

/// RMSProp: `v ← αv + (1−α)g²`, `θ ← θ − lr·g/(√v + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(params: &ParameterSet, config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            square_avg: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.values.len()])
                .collect(),
        }
    }

    pub fn square_averages(&self) -> &[Vec<f64>] {
        &self.square_avg
    }

    /// Applies one update in place. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientTape) -> Result<StepReport> {
        if !grads.is_aligned_with(params) || self.square_avg.len() != params.len() {
            return Err(Error::contract("gradient tape is not aligned with parameters"));
        }
        for (id, g) in params.ids().zip(grads.arrays()) {
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {pos} is {}",
                    params.tensor(id).name,
                    g[pos]
                )));
            }
        }
        let grad_norm = grads.global_norm();
        let clip_scale = match self.config.clip_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        let RmsPropConfig { lr, alpha, eps, .. } = self.config;
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads.arrays()).zip(&mut self.square_avg) {
            let theta = params.values_mut(id);
            for ((p, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                let gi = gi * clip_scale;
                *vi = alpha * *vi + (1.0 - alpha) * gi * gi;
                *p -= lr * gi / (vi.sqrt() + eps);
            }
        }
        params.bump_version();
        Ok(StepReport {
            grad_norm,
            clip_scale,
        })
    }
}
