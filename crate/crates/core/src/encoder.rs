//! Pre-norm transformer encoder with per-block FFN taps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, SelfAttention};
use crate::params::{ParamBuilder, ParamGroup, ParamId};
use crate::rng::Rng64;
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Size of the learned positional table.
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn base() -> Self {
        EncoderConfig { n_blocks: 12, dim: 768, ffn_dim: 3072, n_heads: 12, dropout: 0.1, max_len: 1024 }
    }

    pub fn large() -> Self {
        EncoderConfig { n_blocks: 24, dim: 1024, ffn_dim: 4096, n_heads: 16, dropout: 0.1, max_len: 1024 }
    }

    pub fn tiny(n_blocks: usize, dim: usize, n_heads: usize) -> Self {
        EncoderConfig { n_blocks, dim, ffn_dim: 4 * dim, n_heads, dropout: 0.0, max_len: 256 }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_blocks == 0 {
            errs.push("model.n_blocks must be >= 1".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            errs.push(format!("model.dim {} must be divisible by model.n_heads {}", self.dim, self.n_heads));
        }
        if self.ffn_dim == 0 {
            errs.push("model.ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push("model.dropout must be in [0, 1)".into());
        }
        if self.max_len == 0 {
            errs.push("model.max_len must be positive".into());
        }
        errs
    }
}

/// One pre-norm block: `x' = x + Attn(LN(x))`, `y = x' + FFN(LN(x'))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub y: Var,
    /// Residual stream after the attention sub-layer.
    pub mid: Var,
    /// Addend of the last residual connection (FFN output).
    pub ffn_tap: Var,
}

impl EncoderBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &EncoderConfig) -> Self {
        pb.scoped(name, |pb| EncoderBlock {
            ln1: LayerNorm::new(pb, "ln1", cfg.dim),
            attn: SelfAttention::new(pb, "attn", cfg.dim, cfg.n_heads),
            ln2: LayerNorm::new(pb, "ln2", cfg.dim),
            ffn: FeedForward::new(pb, "ffn", cfg.dim, cfg.ffn_dim),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        dropout: f64,
        mut rng: Option<&mut Rng64>,
        probs: Option<&mut Vec<Var>>,
    ) -> Result<BlockOutput> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, None, probs)?;
        let a = tape.dropout(a, dropout, rng.as_deref_mut());
        let mid = tape.add(x, a)?;
        let h = self.ln2.forward(tape, mid)?;
        let f = self.ffn.forward(tape, h, dropout, rng.as_deref_mut())?;
        let ffn_tap = tape.dropout(f, dropout, rng.as_deref_mut());
        let y = tape.add(mid, ffn_tap)?;
        Ok(BlockOutput { y, mid, ffn_tap })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub z: Var,
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Self {
        pb.with_group(ParamGroup::Encoder, |pb| {
            pb.scoped("encoder", |pb| Encoder {
                cfg: cfg.clone(),
                pos: pb.sinusoid("pos", cfg.max_len, cfg.dim),
                blocks: (0..cfg.n_blocks).map(|i| EncoderBlock::new(pb, &format!("block{i}"), cfg)).collect(),
                final_ln: LayerNorm::new(pb, "final_ln", cfg.dim),
            })
        })
    }

    /// `Z = T(m)`; `rng` enables dropout (training mode).
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        m: Var,
        rng: Option<&mut Rng64>,
        capture_taps: bool,
    ) -> Result<EncoderOutput> {
        self.encode_inner(tape, m, rng, capture_taps, None)
    }

    /// Like [`Encoder::encode`], also returning every head's attention matrix.
    pub fn encode_with_attention<T: Real>(&self, tape: &mut Tape<'_, T>, m: Var) -> Result<(EncoderOutput, Vec<Var>)> {
        let mut probs = Vec::new();
        let out = self.encode_inner(tape, m, None, true, Some(&mut probs))?;
        Ok((out, probs))
    }

    fn encode_inner<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        m: Var,
        mut rng: Option<&mut Rng64>,
        capture_taps: bool,
        mut probs: Option<&mut Vec<Var>>,
    ) -> Result<EncoderOutput> {
        let (u, d) = tape.value(m).dims2()?;
        if d != self.cfg.dim {
            return Err(Error::dim(format!("encoder width {} got features of width {d}", self.cfg.dim)));
        }
        if u > self.cfg.max_len {
            return Err(Error::dim(format!("sequence of {u} steps exceeds max_len {}", self.cfg.max_len)));
        }
        let table = tape.param(self.pos);
        let ids: Vec<usize> = (0..u).collect();
        let pos = tape.embedding(table, &ids)?;
        let x = tape.add(m, pos)?;
        let mut x = tape.dropout(x, self.cfg.dropout, rng.as_deref_mut());
        let mut taps = Vec::new();
        for b in &self.blocks {
            let out = b.forward(tape, x, self.cfg.dropout, rng.as_deref_mut(), probs.as_deref_mut())?;
            if capture_taps {
                taps.push(out.ffn_tap);
            }
            x = out.y;
        }
        let z = self.final_ln.forward(tape, x)?;
        Ok(EncoderOutput { z, taps })
    }
}
