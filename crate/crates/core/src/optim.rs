//! AdamW with global-norm clipping, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (k, v) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        if self.eps <= 0.0 {
            errs.push("optim.eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            errs.push("optim.weight_decay must be >= 0".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            errs.push("optim.clip_norm must be positive".into());
        }
        errs
    }
}

/// First and second moments plus the bias-correction step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One AdamW update. Parameters with no gradient (frozen or unused) are
    /// left untouched, moments included. Non-finite gradients reject the step
    /// without modifying anything.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<StepStats> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let mut sq = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.tensors()[i].shape() {
                    return Err(Error::dim(format!("gradient shape mismatch for {}", params.name(crate::ParamId(i)))));
                }
                for &x in g.data() {
                    let x = x.to_f64c();
                    if !x.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for {}; step rejected",
                            params.name(crate::ParamId(i))
                        )));
                    }
                    sq += x * x;
                }
            }
        }
        let grad_norm = sq.sqrt();
        let scale = match cfg.clip_norm {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let (s, lr_t, eps) = (T::lit(scale), T::lit(lr), T::lit(cfg.eps));
        let (ibc1, ibc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.tensors_mut()[i];
            let wd = if p.ndim() >= 2 { T::lit(cfg.weight_decay) } else { T::zero() };
            let m = self.m.tensors_mut()[i].data_mut();
            let v = self.v.tensors_mut()[i].data_mut();
            for (((pj, mj), vj), &gj) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                let gj = gj * s;
                *mj = b1 * *mj + ob1 * gj;
                *vj = b2 * *vj + ob2 * gj * gj;
                let mhat = *mj * ibc1;
                let vhat = *vj * ibc2;
                *pj = *pj - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *pj);
            }
        }
        Ok(StepStats { grad_norm, clipped: scale < 1.0 })
    }
}

/// Linear warmup from `init_scale*peak`, hold, then exponential decay to
/// `final_scale*peak` at `total`.
pub fn tri_stage_lr(step: u64, warmup: u64, hold: u64, total: u64, peak: f64, init_scale: f64, final_scale: f64) -> f64 {
    if step < warmup {
        let f = step as f64 / warmup as f64;
        return peak * (init_scale + (1.0 - init_scale) * f);
    }
    let decay_start = warmup + hold;
    if step < decay_start {
        return peak;
    }
    let decay = total.saturating_sub(decay_start);
    let progress = if decay == 0 { 1.0 } else { ((step - decay_start) as f64 / decay as f64).min(1.0) };
    peak * (final_scale.ln() * progress).exp()
}

/// Linear warmup then half-cosine decay to zero at `total`.
pub fn cosine_lr(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    let progress = if span == 0 { 1.0 } else { ((step - warmup) as f64 / span as f64).min(1.0) };
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear warmup then linear decay to zero at `total`.
pub fn warmup_linear_lr(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    let progress = if span == 0 { 1.0 } else { ((step - warmup) as f64 / span as f64).min(1.0) };
    peak * (1.0 - progress)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    TriStage { warmup: u64, hold: u64, total: u64, peak: f64, init_scale: f64, final_scale: f64 },
    Cosine { warmup: u64, total: u64, peak: f64 },
    WarmupLinear { warmup: u64, total: u64, peak: f64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::TriStage { warmup, hold, total, peak, init_scale, final_scale } => {
                tri_stage_lr(step, warmup, hold, total, peak, init_scale, final_scale)
            }
            LrSchedule::Cosine { warmup, total, peak } => cosine_lr(step, warmup, total, peak),
            LrSchedule::WarmupLinear { warmup, total, peak } => warmup_linear_lr(step, warmup, total, peak),
            LrSchedule::Constant { lr } => lr,
        }
    }

    /// Pretraining default: 3% warmup, linear decay.
    pub fn pretrain(total: u64, peak: f64) -> Self {
        LrSchedule::WarmupLinear { warmup: (total * 3).div_ceil(100), total, peak }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match *self {
            LrSchedule::TriStage { warmup, hold, total, peak, init_scale, final_scale } => {
                if warmup + hold > total {
                    errs.push(format!("tri-stage warmup {warmup} + hold {hold} exceeds total {total}"));
                }
                if !(init_scale > 0.0 && final_scale > 0.0) {
                    errs.push("tri-stage scales must be positive".into());
                }
                if peak <= 0.0 {
                    errs.push("lr peak must be positive".into());
                }
            }
            LrSchedule::Cosine { warmup, total, peak } | LrSchedule::WarmupLinear { warmup, total, peak } => {
                if warmup > total {
                    errs.push(format!("lr warmup {warmup} exceeds total {total}"));
                }
                if peak <= 0.0 {
                    errs.push("lr peak must be positive".into());
                }
            }
            LrSchedule::Constant { lr } => {
                if lr < 0.0 {
                    errs.push("lr must be >= 0".into());
                }
            }
        }
        errs
    }
}
