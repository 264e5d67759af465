//! Teacher-student pretraining: loss, training state, step and loop.

use std::time::Instant;

use rand::{seq::index::sample, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{sample_mask, select_modality, MaskSet, Modality, ModalitySchedule};
use crate::model::{AvModel, ModelConfig, Sample};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::par::{par_map, ExecMode};
use crate::params::ParamStore;
use crate::rng::{rng_from, Rng64};
use crate::targets::{build_targets, ema_update, tau_at, EmaSchedule};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

/// Video-only inputs also regress the unmasked steps.
pub fn loss_weights_for(sel: Modality) -> LossWeights {
    match sel {
        Modality::AudioVisual | Modality::Audio => LossWeights { alpha: 1.0, beta: 0.0 },
        Modality::Video => LossWeights { alpha: 1.0, beta: 1.0 },
    }
}

/// Per-timestep weights: `alpha` on masked steps, `beta` elsewhere.
pub fn step_weights(mask: &MaskSet, w: LossWeights) -> Vec<f64> {
    mask.membership().into_iter().map(|m| if m { w.alpha } else { w.beta }).collect()
}

/// `alpha * sum_{t in I} |z_t - y_t|^2 + beta * sum_{t not in I} |z_t - y_t|^2`.
/// `y` enters as a constant, so no gradient reaches whatever produced it.
pub fn pretrain_loss<T: Real>(tape: &mut Tape<'_, T>, z: Var, y: &Tensor<T>, mask: &MaskSet, w: LossWeights) -> Result<Var> {
    if tape.shape(z) != y.shape() {
        return Err(Error::dim(format!("prediction {:?} vs target {:?}", tape.shape(z), y.shape())));
    }
    if mask.seq_len() != y.shape()[0] {
        return Err(Error::dim(format!("mask over {} steps for {} targets", mask.seq_len(), y.shape()[0])));
    }
    let yc = tape.constant(y.clone());
    let d = tape.sub(z, yc)?;
    let sq = tape.mul(d, d)?;
    let wts: Vec<T> = step_weights(mask, w).into_iter().map(T::lit).collect();
    tape.weighted_row_sum(sq, &wts)
}

/// Number of timesteps that carry nonzero weight.
pub fn counted_steps(mask: &MaskSet, w: LossWeights) -> usize {
    step_weights(mask, w).iter().filter(|&&x| x != 0.0).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub student: ModalitySchedule,
    pub teacher: ModalitySchedule,
    /// Span start probability, percent.
    pub mask_prob: f64,
    pub mask_span: usize,
    pub ema: EmaSchedule,
    pub top_k: usize,
    pub adam: AdamConfig,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub updates: u64,
}

impl PretrainConfig {
    pub fn new(model: ModelConfig, updates: u64) -> Self {
        let top_k = model.encoder.n_blocks;
        PretrainConfig {
            model,
            student: ModalitySchedule::student_default(),
            teacher: ModalitySchedule::audio_only(),
            mask_prob: 50.0,
            mask_span: 10,
            ema: EmaSchedule::default(),
            top_k,
            adam: AdamConfig::default(),
            lr: LrSchedule::pretrain(updates, 5e-4),
            batch_size: 8,
            updates,
        }
    }

    /// A-data2vec: video never reaches the transformer.
    pub fn audio_only(mut self) -> Self {
        self.student = ModalitySchedule::audio_only();
        self.teacher = ModalitySchedule::audio_only();
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.model.validate();
        errs.extend(self.student.validate("student"));
        errs.extend(self.teacher.validate("teacher"));
        if !(0.0..=100.0).contains(&self.mask_prob) {
            errs.push(format!("mask.prob must be a percentage, got {}", self.mask_prob));
        }
        if self.mask_span == 0 {
            errs.push("mask.span must be >= 1".into());
        }
        errs.extend(self.ema.validate());
        if self.top_k == 0 || self.top_k > self.model.encoder.n_blocks {
            errs.push(format!("targets.top_k {} outside 1..={}", self.top_k, self.model.encoder.n_blocks));
        }
        errs.extend(self.adam.validate());
        errs.extend(self.lr.validate());
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        errs
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub opt: AdamState<f32>,
    pub step: u64,
    pub rng: Rng64,
}

impl ModelState {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(AvModel, Self)> {
        let (model, student) = AvModel::init::<f32>(cfg, seed)?;
        let teacher = student.clone();
        let opt = AdamState::new(&student);
        Ok((model, ModelState { student, teacher, opt, step: 0, rng: rng_from(seed, &[0x57a7e]) }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Objective divided by the number of counted timesteps.
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Student selections in this step, `[av, a, v]`.
    pub modality: [usize; 3],
    pub wall_ms: f64,
}

struct UttResult {
    loss: f64,
    counted: usize,
    sel: Modality,
    grads: Vec<Option<Tensor<f32>>>,
}

/// Targets for one utterance from the teacher on unmasked input.
pub fn teacher_targets<T: Real>(
    model: &AvModel,
    teacher: &ParamStore<T>,
    s: &Sample<T>,
    sel: Modality,
    top_k: usize,
) -> Result<Tensor<T>> {
    let taps = model.teacher_taps(teacher, s, sel, &MaskSet::empty(s.len()))?;
    Ok(build_targets(&taps, top_k)?.y)
}

fn utterance_grads(
    model: &AvModel,
    state: &ModelState,
    cfg: &PretrainConfig,
    s: &Sample<f32>,
    step_seed: u64,
    i: usize,
) -> Result<UttResult> {
    let mut rng = rng_from(step_seed, &[i as u64]);
    let tsel = select_modality(&mut rng, &cfg.teacher.probs_at(state.step)?);
    let y = teacher_targets(model, &state.teacher, s, tsel, cfg.top_k)?;
    let sel = select_modality(&mut rng, &cfg.student.probs_at(state.step)?);
    let mask = sample_mask(s.len(), cfg.mask_prob, cfg.mask_span, &mut rng);
    let w = loss_weights_for(sel);
    let mut tape = Tape::with_params(&state.student, true);
    let drop_rng = if cfg.model.encoder.dropout > 0.0 { Some(&mut rng) } else { None };
    let out = model.forward(&mut tape, s, sel, &mask, drop_rng, false)?;
    let loss = pretrain_loss(&mut tape, out.z, &y, &mask, w)?;
    let lv = tape.value(loss).data()[0] as f64;
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite pretraining loss at step {}", state.step)));
    }
    let grads = tape.backward(loss)?.into_param_grads();
    Ok(UttResult { loss: lv, counted: counted_steps(&mask, w), sel, grads })
}

/// Sum per-utterance gradients in index order.
pub(crate) fn reduce_grads(parts: Vec<Vec<Option<Tensor<f32>>>>, n: usize) -> Vec<Option<Tensor<f32>>> {
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; n];
    for part in parts {
        for (a, g) in acc.iter_mut().zip(part) {
            match (a.as_mut(), g) {
                (_, None) => {}
                (None, Some(g)) => *a = Some(g),
                (Some(a), Some(g)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    acc
}

/// One update on `batch`: targets from the teacher, masked student forward,
/// weighted regression loss, AdamW on the student, EMA on the teacher.
pub fn pretrain_step(model: &AvModel, state: &mut ModelState, cfg: &PretrainConfig, batch: &[Sample<f32>]) -> Result<StepMetrics> {
    let t0 = Instant::now();
    if batch.is_empty() {
        return Err(Error::Contract("empty pretraining batch".into()));
    }
    let step_seed = state.rng.next_u64();
    let shared: &ModelState = state;
    let results = par_map(ExecMode::current(), batch, |i, s| utterance_grads(model, shared, cfg, s, step_seed, i));
    let mut parts = Vec::with_capacity(results.len());
    let (mut total, mut counted, mut modality) = (0.0, 0usize, [0usize; 3]);
    for r in results {
        let r = r?;
        total += r.loss;
        counted += r.counted;
        modality[r.sel.index()] += 1;
        parts.push(r.grads);
    }
    let grads = reduce_grads(parts, state.student.len());
    let lr = cfg.lr.at(state.step);
    state.opt.step(&cfg.adam, &mut state.student, &grads, lr)?;
    let tau = tau_at(&cfg.ema, state.step);
    ema_update(&mut state.teacher, &state.student, tau)?;
    let step = state.step;
    state.step += 1;
    Ok(StepMetrics {
        step,
        loss: total / counted.max(1) as f64,
        lr,
        tau,
        modality,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Draw a batch of distinct utterance indices from the state's stream.
pub fn draw_batch(rng: &mut Rng64, corpus_len: usize, batch_size: usize) -> Vec<usize> {
    let n = batch_size.min(corpus_len);
    let mut idx = sample(rng, corpus_len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Run until `state.step == until`, calling `on_step` after every update.
pub fn pretrain_loop(
    model: &AvModel,
    state: &mut ModelState,
    cfg: &PretrainConfig,
    corpus: &[Sample<f32>],
    until: u64,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    while state.step < until {
        let idx = draw_batch(&mut state.rng, corpus.len(), cfg.batch_size);
        let batch: Vec<Sample<f32>> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let m = pretrain_step(model, state, cfg, &batch)?;
        on_step(&m)?;
    }
    Ok(())
}
