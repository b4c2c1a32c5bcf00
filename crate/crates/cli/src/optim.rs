//! AdamW with decoupled weight decay and the warmup-cosine learning-rate
//! schedule.
//!
//! Moments are held in f64 keyed by parameter name, so optimizer math is
//! independent of visit order and bit-reproducible; parameters stay f32.
//! Decay multiplies each parameter by `1 - lr * wd` before the Adam
//! update, so `wd = 0` reduces exactly to plain Adam.

use std::collections::BTreeMap;

use ukanep_core::error::{Error, Result};
use ukanep_core::param::Visit;
use ukanep_core::tensor::Tensor;
use ukanep_core::GradientMap;

use crate::config::TrainConfig;

/// Linear warmup from `lr_start` to `lr_peak` over `warmup_epochs`, then
/// cosine decay to 0 at `epochs`. Continuous at the boundary and monotone
/// on each segment.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} beyond schedule end {}",
            cfg.epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        let t = epoch as f64 / cfg.warmup_epochs as f64;
        return Ok(cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * t);
    }
    let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
    Ok(cfg.lr_peak * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.betas, cfg.eps, cfg.weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restores serialized state (checkpoint resume).
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// One update over every parameter of `module`. A parameter without a
    /// gradient entry signals a broken graph and is an error.
    pub fn step(
        &mut self,
        module: &mut dyn Visit<f32>,
        grads: &GradientMap<f32>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.betas.0.powi(t);
        let bias2 = 1.0 - self.betas.1.powi(t);
        let mut failure: Option<Error> = None;
        module.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = grads.get(&p.name) else {
                failure = Some(Error::MissingGradient(p.name.clone()));
                return;
            };
            let state = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                });
            let g = grad.data();
            let old = p.value.data();
            debug_assert_eq!(old.len(), g.len());
            let mut next = Vec::with_capacity(old.len());
            for i in 0..old.len() {
                let gi = g[i] as f64;
                let mut x = old[i] as f64;
                x *= 1.0 - lr * self.weight_decay;
                state.m[i] = self.betas.0 * state.m[i] + (1.0 - self.betas.0) * gi;
                state.v[i] = self.betas.1 * state.v[i] + (1.0 - self.betas.1) * gi * gi;
                let m_hat = state.m[i] / bias1;
                let v_hat = state.v[i] / bias2;
                x -= lr * m_hat / (v_hat.sqrt() + self.eps);
                next.push(x as f32);
            }
            p.value = Tensor::from_vec(p.value.shape(), next).expect("shape unchanged");
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
