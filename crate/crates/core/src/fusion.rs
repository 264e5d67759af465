//! Modality scheduling, additive audio-visual fusion and span masking.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{par_map_range, ExecMode};
use crate::rng::rng_from;
use crate::tensor::{Real, Tape, Var};

/// A probability annealed linearly from `start` to `end` over `anneal_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledProb {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl ScheduledProb {
    pub fn new(start: f64, end: f64, anneal_steps: u64) -> Self {
        ScheduledProb { start, end, anneal_steps }
    }

    pub fn constant(p: f64) -> Self {
        ScheduledProb { start: p, end: p, anneal_steps: 0 }
    }

    pub fn validate(&self, name: &str) -> Vec<String> {
        let mut errs = Vec::new();
        for (what, v) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name}.{what} = {v} is not a probability"));
            }
        }
        errs
    }
}

/// Linear interpolation clamped at `end`; `start` when `anneal_steps == 0`.
pub fn anneal_value(s: &ScheduledProb, step: u64) -> f64 {
    if s.anneal_steps == 0 {
        return s.start;
    }
    let frac = (step as f64 / s.anneal_steps as f64).min(1.0);
    s.start + (s.end - s.start) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "av")]
    AudioVisual,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::AudioVisual, Modality::Audio, Modality::Video];

    pub fn uses_audio(self) -> bool {
        self != Modality::Video
    }

    pub fn uses_video(self) -> bool {
        self != Modality::Audio
    }

    pub fn index(self) -> usize {
        match self {
            Modality::AudioVisual => 0,
            Modality::Audio => 1,
            Modality::Video => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::AudioVisual => "av",
            Modality::Audio => "a",
            Modality::Video => "v",
        })
    }
}

/// Unconditional selection probabilities `(p_AV, p_A, p_V)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityProbs {
    pub av: f64,
    pub a: f64,
    pub v: f64,
}

impl ModalityProbs {
    pub fn sum(&self) -> f64 {
        self.av + self.a + self.v
    }
}

const COND_TOL: f64 = 1e-9;

/// `p_A = (1 - p_av) p_a_cond`, `p_V = (1 - p_av) p_v_cond`.
pub fn effective_probs(p_av: f64, p_v_cond: f64, p_a_cond: f64) -> Result<ModalityProbs> {
    for (n, p) in [("p_av", p_av), ("p_v_cond", p_v_cond), ("p_a_cond", p_a_cond)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("{n} = {p} is not a probability")));
        }
    }
    if (p_v_cond + p_a_cond - 1.0).abs() > COND_TOL {
        return Err(Error::config(format!(
            "conditional probabilities must sum to 1, got {p_v_cond} + {p_a_cond}"
        )));
    }
    let rest = 1.0 - p_av;
    Ok(ModalityProbs { av: p_av, a: rest * p_a_cond, v: rest * p_v_cond })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySchedule {
    pub p_av: ScheduledProb,
    pub p_v_cond: ScheduledProb,
    pub p_a_cond: ScheduledProb,
}

impl ModalitySchedule {
    /// Student default: `p_av` 1 -> 0.25 over 150k steps, video whenever not AV.
    pub fn student_default() -> Self {
        ModalitySchedule {
            p_av: ScheduledProb::new(1.0, 0.25, 150_000),
            p_v_cond: ScheduledProb::constant(1.0),
            p_a_cond: ScheduledProb::constant(0.0),
        }
    }

    /// Teacher default: audio only.
    pub fn audio_only() -> Self {
        Self::fixed(0.0, 0.0, 1.0)
    }

    pub fn fixed(p_av: f64, p_v_cond: f64, p_a_cond: f64) -> Self {
        ModalitySchedule {
            p_av: ScheduledProb::constant(p_av),
            p_v_cond: ScheduledProb::constant(p_v_cond),
            p_a_cond: ScheduledProb::constant(p_a_cond),
        }
    }

    pub fn probs_at(&self, step: u64) -> Result<ModalityProbs> {
        effective_probs(anneal_value(&self.p_av, step), anneal_value(&self.p_v_cond, step), anneal_value(&self.p_a_cond, step))
    }

    /// Checks ranges and that the conditionals sum to one at every step. Both
    /// conditionals are piecewise linear, so checking every breakpoint suffices.
    pub fn validate(&self, name: &str) -> Vec<String> {
        let mut errs = self.p_av.validate(&format!("{name}.p_av"));
        errs.extend(self.p_v_cond.validate(&format!("{name}.p_v_cond")));
        errs.extend(self.p_a_cond.validate(&format!("{name}.p_a_cond")));
        if errs.is_empty() {
            for step in [0, self.p_v_cond.anneal_steps, self.p_a_cond.anneal_steps] {
                let s = anneal_value(&self.p_v_cond, step) + anneal_value(&self.p_a_cond, step);
                if (s - 1.0).abs() > COND_TOL {
                    errs.push(format!("{name}: p_v_cond + p_a_cond = {s} at step {step}, must be 1"));
                    break;
                }
            }
        }
        errs
    }
}

/// One categorical draw.
pub fn select_modality<R: Rng + ?Sized>(rng: &mut R, probs: &ModalityProbs) -> Modality {
    let u: f64 = rng.random();
    if u < probs.av {
        Modality::AudioVisual
    } else if u < probs.av + probs.a {
        Modality::Audio
    } else {
        Modality::Video
    }
}

/// Additive fusion. The modality left out of `sel` contributes zeros, so the
/// other stream is returned unchanged and the absent one may be `None`.
pub fn fuse<T: Real>(tape: &mut Tape<'_, T>, m_a: Option<Var>, m_v: Option<Var>, sel: Modality) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::dim(format!("fusion needs {what} features")));
    match sel {
        Modality::AudioVisual => {
            let (a, v) = (need(m_a, "audio")?, need(m_v, "video")?);
            tape.add(a, v)
        }
        Modality::Audio => need(m_a, "audio"),
        Modality::Video => need(m_v, "video"),
    }
}

/// Masked timestep indices of one utterance (shared across modalities).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    indices: Vec<usize>,
    len: usize,
}

impl MaskSet {
    pub fn empty(len: usize) -> Self {
        MaskSet { indices: Vec::new(), len }
    }

    pub fn from_indices(len: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&i| i >= len) {
            return Err(Error::dim(format!("mask index out of range for length {len}")));
        }
        Ok(MaskSet { indices, len })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.len];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn coverage(&self) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.len as f64
        }
    }
}

/// Every timestep starts a span with probability `r_percent / 100`; each span
/// covers `span` steps (clipped at the end) and overlapping spans merge.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, r_percent: f64, span: usize, rng: &mut R) -> MaskSet {
    let p = r_percent / 100.0;
    let mut covered = vec![false; len];
    for t in 0..len {
        if rng.random::<f64>() < p {
            for c in covered.iter_mut().take((t + span).min(len)).skip(t) {
                *c = true;
            }
        }
    }
    let indices = covered.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect();
    MaskSet { indices, len }
}

/// Mean masked fraction over `n_seeds` independently seeded draws.
pub fn mean_mask_coverage(len: usize, r_percent: f64, span: usize, base_seed: u64, n_seeds: usize, mode: ExecMode) -> f64 {
    let covs = par_map_range(mode, n_seeds, |s| {
        let mut rng = rng_from(base_seed, &[s as u64]);
        sample_mask(len, r_percent, span, &mut rng).coverage()
    });
    covs.iter().sum::<f64>() / n_seeds.max(1) as f64
}

/// Replace masked rows of `m` with the learned mask embedding.
pub fn apply_mask<T: Real>(tape: &mut Tape<'_, T>, m: Var, mask: &MaskSet, emb: Var) -> Result<Var> {
    let (u, _) = tape.value(m).dims2()?;
    if mask.seq_len() != u {
        return Err(Error::dim(format!("mask for length {} applied to {u} steps", mask.seq_len())));
    }
    if mask.is_empty() {
        return Ok(m);
    }
    tape.replace_rows(m, emb, mask.indices())
}
