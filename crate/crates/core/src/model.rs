//! The shared audio-visual model: front ends, fusion, masking, encoder.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::frontends::{AudioEncoder, FrontendConfig, VideoEncoder};
use crate::fusion::{apply_mask, fuse, MaskSet, Modality};
use crate::params::{ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::rng::{rng_from, Rng64};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn tiny(n_blocks: usize, dim: usize, n_heads: usize) -> Self {
        ModelConfig { frontend: FrontendConfig::new(dim), encoder: EncoderConfig::tiny(n_blocks, dim, n_heads) }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.frontend.validate();
        errs.extend(self.encoder.validate());
        if self.frontend.dim != self.encoder.dim {
            errs.push(format!(
                "front-end width {} must equal encoder width {}",
                self.frontend.dim, self.encoder.dim
            ));
        }
        errs
    }
}

/// Model input for one utterance at the fused frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// Stacked, normalized audio `[U, F']`.
    pub audio: Tensor<T>,
    /// Video frames `[U, C, H, W]`.
    pub video: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> Sample<U> {
        Sample { audio: self.audio.cast(), video: self.video.cast() }
    }
}

#[derive(Clone, Debug)]
pub struct AvModel {
    pub cfg: ModelConfig,
    pub audio: AudioEncoder,
    pub video: VideoEncoder,
    pub mask_emb: ParamId,
    pub encoder: Encoder,
}

impl AvModel {
    /// Register all parameters in `store` using `rng` for initialization.
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::config(errs.join("; ")));
        }
        let mut pb = ParamBuilder::new(store, rng, ParamGroup::Audio);
        let audio = AudioEncoder::new(&mut pb, &cfg.frontend);
        let video = VideoEncoder::new(&mut pb, &cfg.frontend);
        let mask_emb = pb.with_group(ParamGroup::Fusion, |pb| pb.normal("mask_emb", &[cfg.encoder.dim], 0.02));
        let encoder = Encoder::new(&mut pb, &cfg.encoder);
        Ok(AvModel { cfg: cfg.clone(), audio, video, mask_emb, encoder })
    }

    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, &[0x1_417]);
        let m = Self::build(cfg, &mut store, &mut rng)?;
        Ok((m, store))
    }

    /// Front ends for the modalities `sel` uses, then additive fusion.
    pub fn fused_features<T: Real>(&self, tape: &mut Tape<'_, T>, s: &Sample<T>, sel: Modality) -> Result<Var> {
        let u = s.len();
        if s.video.shape().first() != Some(&u) {
            return Err(Error::dim(format!(
                "audio has {u} frames but video has {:?}",
                s.video.shape().first()
            )));
        }
        let m_a = if sel.uses_audio() { Some(self.audio.forward(tape, &s.audio)?) } else { None };
        let m_v = if sel.uses_video() { Some(self.video.forward(tape, &s.video)?) } else { None };
        fuse(tape, m_a, m_v, sel)
    }

    /// Fuse, mask, encode.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        s: &Sample<T>,
        sel: Modality,
        mask: &MaskSet,
        rng: Option<&mut Rng64>,
        capture_taps: bool,
    ) -> Result<EncoderOutput> {
        let m = self.fused_features(tape, s, sel)?;
        let emb = tape.param(self.mask_emb);
        let masked = apply_mask(tape, m, mask, emb)?;
        self.encoder.encode(tape, masked, rng, capture_taps)
    }

    /// Teacher pass: unmasked input, evaluation mode, FFN taps captured.
    pub fn teacher_taps<T: Real>(&self, store: &ParamStore<T>, s: &Sample<T>, sel: Modality, mask: &MaskSet) -> Result<Vec<Tensor<T>>> {
        if !mask.is_empty() {
            return Err(Error::Contract(format!("teacher forward must be unmasked, got {} masked steps", mask.size())));
        }
        let mut tape = Tape::with_params(store, false);
        let out = self.forward(&mut tape, s, sel, mask, None, true)?;
        Ok(out.taps.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Final representation `Z` for an unmasked input in evaluation mode.
    pub fn represent<T: Real>(&self, store: &ParamStore<T>, s: &Sample<T>, sel: Modality) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(store, false);
        let out = self.forward(&mut tape, s, sel, &MaskSet::empty(s.len()), None, false)?;
        Ok(tape.value(out.z).clone())
    }
}
