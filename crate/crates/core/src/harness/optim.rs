//! Adam with coupled L2 weight decay and global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::checkpoint::{ArrayMap, ArrayRecord};
use super::config::OptimConfig;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Updates applied so far.
    pub step: u64,
    m: std::collections::BTreeMap<String, Tensor>,
    v: std::collections::BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            step: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<StepStats> {
        let params = store.params();
        let mut present = Vec::with_capacity(params.len());
        let mut sq = 0f64;
        for (name, var) in &params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                present.push((name, var, g));
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm} at optimizer step {}", self.step + 1)));
        }
        let clipped = self.grad_clip > 0.0 && grad_norm > self.grad_clip;
        let scale = if clipped { self.grad_clip / (grad_norm + 1e-6) } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in present {
            // detached, so the stored moments do not keep autograd graphs alive
            let p = var.as_tensor().detach();
            let mut g = (g.detach() * scale)?;
            if self.weight_decay > 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            let m = match self.m.get(name.as_str()) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name.as_str()) {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(&p - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(StepStats { grad_norm, clipped })
    }

    pub fn export(&self) -> Result<(u64, ArrayMap, ArrayMap)> {
        let conv = |m: &std::collections::BTreeMap<String, Tensor>| -> Result<ArrayMap> {
            m.iter().map(|(k, t)| Ok((k.clone(), ArrayRecord::from_tensor(t)?))).collect()
        };
        Ok((self.step, conv(&self.m)?, conv(&self.v)?))
    }

    pub fn import(&mut self, step: u64, m: &ArrayMap, v: &ArrayMap, device: &Device) -> Result<()> {
        let conv = |a: &ArrayMap| -> Result<std::collections::BTreeMap<String, Tensor>> {
            a.iter().map(|(k, r)| Ok((k.clone(), r.to_tensor(device)?))).collect()
        };
        self.step = step;
        self.m = conv(m)?;
        self.v = conv(v)?;
        Ok(())
    }
}

/// Learning rate at `epoch`: constant, or cosine decay to zero over `epochs`.
pub fn learning_rate(cfg: &OptimConfig, epoch: usize) -> f64 {
    if cfg.cosine_schedule {
        0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
    } else {
        cfg.lr
    }
}
