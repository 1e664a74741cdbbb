//! Adam with warmup followed by inverse square root decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::layers::Tensors;
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Threads per step.
    pub batch_size: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-4,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
            batch_size: 8,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::invalid("eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::invalid("clip_norm must be >= 0"));
        }
        Ok(())
    }

    /// `lr * min(step / warmup, sqrt(warmup / step))`, constant without warmup.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.lr.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::invalid(format!("missing optimizer key {key}")))?
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for optimizer key {key}")))
        }
        let cfg = OptimizerConfig {
            lr: get(kv, "lr")?,
            warmup_steps: get(kv, "warmup_steps")?,
            beta1: get(kv, "beta1")?,
            beta2: get(kv, "beta2")?,
            eps: get(kv, "eps")?,
            batch_size: get(kv, "batch_size")?,
            clip_norm: get(kv, "clip_norm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one bias-corrected update for optimizer step `step` (1-based).
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &OptimizerConfig, step: u64) {
        let lr = cfg.learning_rate(step);
        let c1 = 1.0 - cfg.beta1.powf(step as f64);
        let c2 = 1.0 - cfg.beta2.powf(step as f64);
        let mut ms = Vec::new();
        self.m.visit_mut("", &mut |_, t| ms.push(t));
        let mut vs = Vec::new();
        self.v.visit_mut("", &mut |_, t| vs.push(t));
        let mut ps = Vec::new();
        params.visit_mut("", &mut |_, t| ps.push(t));
        let mut gs = Vec::new();
        grads.visit("", &mut |_, t| gs.push(t));
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            });
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit("", &mut |_, t| sq += t.iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
