//! Adam with linear warmup and cosine decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ParamKey;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_frac: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(invalid("eps must be positive; weight decay and clip non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(invalid("warmup_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total`: linear ramp over the warmup
/// steps, then a half cosine down to zero at the final step.
pub fn lr_at(peak: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64) * warmup_frac).ceil() as usize;
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<ParamKey, Moments>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one step to every `(key, param, grad)`; returns the gradient
    /// norm before clipping.
    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = (ParamKey, &'a mut Tensor, &'a [f64])>) -> f64 {
        let items: Vec<_> = params.into_iter().collect();
        let norm = items
            .iter()
            .map(|(_, _, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (key, param, grad) in items {
            let mom = self.state.entry(key).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * clip;
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let update = (mom.m[i] / bc1) / ((mom.v[i] / bc2).sqrt() + c.eps) + c.weight_decay * data[i];
                data[i] -= lr * update;
            }
        }
        norm
    }
}
