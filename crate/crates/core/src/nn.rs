//! Parameterized layers shared by the encoder, decoder and front ends.

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::rng::Rng64;
use crate::tensor::{MatOp, Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        pb.scoped(name, |pb| {
            let w = pb.normal("w", &[d_in, d_out], (1.0 / d_in as f64).sqrt());
            let b = bias.then(|| pb.constant("b", &[d_out], 0.0));
            Linear { w, b, d_in, d_out }
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| LayerNorm { gamma: pb.constant("g", &[dim], 1.0), beta: pb.constant("b", &[dim], 0.0) })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, T::lit(NORM_EPS))
    }
}

/// Scaled dot-product attention over `heads` column groups of `q`, `k`, `v`.
///
/// `bias`, when given, is added to every head's score matrix (causal masks).
/// Attention probabilities are appended to `probs` when it is provided.
pub fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
    mut probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (_, d) = tape.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_op(qh, MatOp::N, kh, MatOp::T)?;
        let mut s = tape.scale(s, scale);
        if let Some(b) = bias {
            s = tape.add(s, b)?;
        }
        let p = tape.softmax(s)?;
        if let Some(ps) = probs.as_deref_mut() {
            ps.push(p);
        }
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        pb.scoped(name, |pb| SelfAttention {
            qkv: Linear::new(pb, "qkv", dim, 3 * dim, true),
            out: Linear::new(pb, "out", dim, dim, true),
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        bias: Option<Var>,
        probs: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.out.d_in;
        let qkv = self.qkv.forward(tape, x)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let a = attend(tape, q, k, v, self.heads, bias, probs)?;
        self.out.forward(tape, a)
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        pb.scoped(name, |pb| CrossAttention {
            q: Linear::new(pb, "q", dim, dim, true),
            kv: Linear::new(pb, "kv", dim, 2 * dim, true),
            out: Linear::new(pb, "out", dim, dim, true),
            heads,
        })
    }

    /// Key/value projections of the memory; reusable across decoding steps.
    pub fn memory<T: Real>(&self, tape: &mut Tape<'_, T>, mem: Var) -> Result<(Var, Var)> {
        let d = self.out.d_in;
        let kv = self.kv.forward(tape, mem)?;
        Ok((tape.slice_cols(kv, 0, d)?, tape.slice_cols(kv, d, d)?))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, kv: (Var, Var)) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let a = attend(tape, q, kv.0, kv.1, self.heads, None, None)?;
        self.out.forward(tape, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| FeedForward {
            l1: Linear::new(pb, "l1", dim, hidden, true),
            l2: Linear::new(pb, "l2", hidden, dim, true),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, p: f64, rng: Option<&mut Rng64>) -> Result<Var> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, p, rng);
        self.l2.forward(tape, h)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative above.
pub fn causal_bias<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| if i % n > i / n { T::lit(-1e9) } else { T::zero() })
}
