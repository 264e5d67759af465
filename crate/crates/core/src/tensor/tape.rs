//! Reverse-mode automatic differentiation over whole-tensor primitives.
//!
//! A [`Tape`] records every primitive in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep that visits each
//! node once. Parameters are pulled from a borrowed [`ParamStore`] on first use
//! and cached, so a parameter used several times accumulates its gradient.

use rand::Rng;

use super::{gemm_into, MatView, Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a matmul operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatOp {
    N,
    T,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn kdim(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    fn npos(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    /// With unit temporal stride the convolution is a sum of `kt` time-shifted
    /// 2-D convolutions sharing one per-frame patch matrix.
    fn shifted(&self) -> bool {
        self.stride[0] == 1
    }

    /// Geometry of the shared per-frame patch matrix.
    fn frame_geom(&self) -> ConvGeom {
        ConvGeom {
            k: [1, self.k[1], self.k[2]],
            stride: [1, self.stride[1], self.stride[2]],
            pad: [0, self.pad[1], self.pad[2]],
            out: [self.t, self.out[1], self.out[2]],
            ..*self
        }
    }

    /// Output frames that read input frame `t + dt - pad_t`, as `lo..hi`.
    fn shift_range(&self, dt: usize) -> (usize, usize) {
        let pt = self.pad[0];
        let lo = pt.saturating_sub(dt);
        let hi = (self.t + pt).saturating_sub(dt).min(self.out[0]);
        (lo, hi.max(lo))
    }

    /// Weights for temporal tap `dt` as a contiguous `[cout, cin*kh*kw]` matrix.
    fn tap_weights<T: Real>(&self, w: &[T], dt: usize) -> Vec<T> {
        let khw = self.k[1] * self.k[2];
        let mut out = Vec::with_capacity(self.cout * self.cin * khw);
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let base = ((co * self.cin + ci) * self.k[0] + dt) * khw;
                out.extend_from_slice(&w[base..base + khw]);
            }
        }
        out
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    /// Derivative cached by the forward pass.
    Gelu { x: Var, d: Vec<T> },
    PRelu { x: Var, slope: Var },
    Softmax(Var),
    LogSoftmax(Var),
    Norm { x: Var, gamma: Var, beta: Var, per_row: bool, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ReplaceRows { x: Var, emb: Var, rows: Vec<usize> },
    WeightedRowSum { x: Var, w: Vec<T> },
    Nll { logp: Var, targets: Vec<usize>, w: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
    Conv3d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    SpatialMean { x: Var, hw: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<T> {
    leaf: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf (constant or parameter); `None` if it has none.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).copied().flatten().and_then(|v| self.wrt(v))
    }

    /// One slot per parameter of the store the tape was built on.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        let params = std::mem::take(&mut self.params);
        params.into_iter().map(|v| v.and_then(|v| self.leaf[v.0].take())).collect()
    }
}

pub struct Tape<'a, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'a ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    frozen: Vec<bool>,
    grad_enabled: bool,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    /// A tape with no parameter store.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), store: None, param_vars: Vec::new(), frozen: Vec::new(), grad_enabled: true }
    }

    /// A tape reading parameters from `store`; with `grad_enabled == false`
    /// parameters enter as constants and nothing needs a gradient.
    pub fn with_params(store: &'a ParamStore<T>, grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            frozen: vec![false; store.len()],
            grad_enabled,
        }
    }

    /// Treat parameters matching `pred` as constants on this tape.
    pub fn freeze(&mut self, pred: impl Fn(ParamId) -> bool) {
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = pred(ParamId(i));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let rg = self.grad_enabled && !self.frozen[id.0];
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn last_dim(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let c = *s.last().unwrap_or(&1);
        let n = self.value(v).numel();
        (if c == 0 { 0 } else { n / c }, c)
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x + b` with `b` broadcast over the leading dimensions of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.last_dim(x);
        if self.value(b).numel() != c {
            return Err(Error::dim(format!("add_row: bias {:?} for {:?}", self.shape(b), self.shape(x))));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_op(a, MatOp::N, b, MatOp::N)
    }

    /// `op(a) op(b)` for 2-D operands.
    pub fn matmul_op(&mut self, a: Var, oa: MatOp, b: Var, ob: MatOp) -> Result<Var> {
        let (ar, ac) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (ta, tb) = (oa == MatOp::T, ob == MatOp::T);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner dimensions {k} and {k2} disagree")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            MatView::new(self.value(a).data(), ar, ac, ta),
            MatView::new(self.value(b).data(), br, bc, tb),
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(&[x]);
        let xv = self.value(x);
        let mut t = xv.clone();
        let mut d = Vec::new();
        if rg {
            d.reserve(t.numel());
            for v in t.data_mut() {
                let (y, dy) = gelu_fwd(*v);
                *v = y;
                d.push(dy);
            }
        } else {
            for v in t.data_mut() {
                *v = gelu_fwd(*v).0;
            }
        }
        self.push(t, Op::Gelu { x, d }, rg)
    }

    /// Parametric ReLU with one slope per leading-dimension channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let ch = self.shape(x).first().copied().unwrap_or(0);
        if self.value(slope).numel() != ch || ch == 0 {
            return Err(Error::dim(format!("prelu: slope {:?} for {:?}", self.shape(slope), self.shape(x))));
        }
        let per = self.value(x).numel() / ch;
        let a = self.value(slope).data().to_vec();
        let mut t = self.value(x).clone();
        for (c, chunk) in t.data_mut().chunks_mut(per.max(1)).enumerate() {
            for v in chunk {
                if *v <= T::zero() {
                    *v *= a[c];
                }
            }
        }
        let rg = self.rg(&[x, slope]);
        Ok(self.push(t, Op::PRelu { x, slope }, rg))
    }

    fn check_no_nan(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("{what}: NaN input")));
        }
        Ok(())
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_no_nan(x, "softmax")?;
        let (_, c) = self.last_dim(x);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_no_nan(x, "log_softmax")?;
        let (_, c) = self.last_dim(x);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Row-wise normalization of a `[U, D]` matrix with per-column affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.norm(x, gamma, beta, eps, false)
    }

    /// Row-wise normalization of a `[C, L]` matrix with per-row (channel) affine.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.norm(x, gamma, beta, eps, true)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T, per_row: bool) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let want = if per_row { r } else { c };
        if c == 0 || self.value(gamma).numel() != want || self.value(beta).numel() != want {
            return Err(Error::dim(format!(
                "norm: gamma {:?} beta {:?} for {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let cn = T::lit(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = if per_row { h * g[i] + b[i] } else { h * g[j] + b[j] };
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(&[r, c], out)?;
        Ok(self.push(t, Op::Norm { x, gamma, beta, per_row, xhat, rstd }, rg))
    }

    /// Inverted dropout; `rng == None` (eval mode) or `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Var {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return x,
        };
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        for (v, &m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::dim(format!("embedding: id {i} out of {v}")));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rr, cc) = self.dims2(x)?;
            if rr != r {
                return Err(Error::dim(format!("concat_cols: {rr} rows vs {r}")));
            }
            widths.push(cc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > c {
            return Err(Error::dim(format!("slice_cols {start}+{len} of {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Copy of `x` with the listed rows replaced by the vector `emb`.
    pub fn replace_rows(&mut self, x: Var, emb: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(emb).numel() != c {
            return Err(Error::dim(format!("replace_rows: embedding {:?} for width {c}", self.shape(emb))));
        }
        let mut t = self.value(x).clone();
        let e = self.value(emb).data().to_vec();
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        for &i in &rows {
            if i >= r {
                return Err(Error::dim(format!("replace_rows: row {i} out of {r}")));
            }
            t.row_mut(i).copy_from_slice(&e);
        }
        let rg = self.rg(&[x, emb]);
        Ok(self.push(t, Op::ReplaceRows { x, emb, rows }, rg))
    }

    /// `sum_t w_t sum_d x[t, d]`.
    pub fn weighted_row_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let (r, _) = self.dims2(x)?;
        if w.len() != r {
            return Err(Error::dim(format!("weighted_row_sum: {} weights for {r} rows", w.len())));
        }
        let s: T = (0..r).map(|i| w[i] * self.value(x).row(i).iter().copied().sum::<T>()).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedRowSum { x, w: w.to_vec() }, rg))
    }

    /// `-sum_t w_t logp[t, target_t]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize], w: &[T]) -> Result<Var> {
        let (r, c) = self.dims2(logp)?;
        if targets.len() != r || w.len() != r {
            return Err(Error::dim(format!("nll: {} targets / {} weights for {r} rows", targets.len(), w.len())));
        }
        let mut s = T::zero();
        for i in 0..r {
            if targets[i] >= c {
                return Err(Error::dim(format!("nll: target {} out of {c}", targets[i])));
            }
            s -= w[i] * self.value(logp).at2(i, targets[i]);
        }
        let rg = self.rg(&[logp]);
        Ok(self.push(Tensor::scalar(s), Op::Nll { logp, targets: targets.to_vec(), w: w.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).sum() / T::lit(n as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// 3-D convolution of `x: [Cin, T, H, W]` with `w: [Cout, Cin, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (cin, t, h, wd) = match self.shape(x) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::dim(format!("conv3d input must be [C,T,H,W], got {s:?}"))),
        };
        let (cout, k) = match self.shape(w) {
            &[o, i, a, b, c] if i == cin => (o, [a, b, c]),
            s => return Err(Error::dim(format!("conv3d weight {s:?} for {cin} input channels"))),
        };
        let dims = [t, h, wd];
        let mut out = [0usize; 3];
        for i in 0..3 {
            let span = dims[i] + 2 * pad[i];
            if span < k[i] || stride[i] == 0 {
                return Err(Error::dim(format!("conv3d: input {dims:?} too small for kernel {k:?}")));
            }
            out[i] = (span - k[i]) / stride[i] + 1;
        }
        let geom = ConvGeom { cin, t, h, w: wd, cout, k, stride, pad, out };
        let (cols, y) = if geom.shifted() { conv_shifted(self.value(x).data(), self.value(w).data(), &geom) } else {
            let cols = im2col(self.value(x).data(), &geom);
            let (kd, np) = (geom.kdim(), geom.npos());
            let mut y = vec![T::zero(); cout * np];
            gemm_into(
                MatView::new(self.value(w).data(), cout, kd, false),
                MatView::new(&cols, kd, np, false),
                T::zero(),
                &mut y,
                np as isize,
                1,
            );
            (cols, y)
        };
        let rg = self.rg(&[x, w]);
        let t = Tensor::new(&[cout, out[0], out[1], out[2]], y)?;
        Ok(self.push(t, Op::Conv3d { x, w, geom, cols }, rg))
    }

    /// 3x3 stride-2 max pooling with padding 1 over each `[H, W]` plane of `[C, T, H, W]`.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (c, t, h, w) = match self.shape(x) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::dim(format!("max_pool2d input must be 4-D, got {s:?}"))),
        };
        if h == 0 || w == 0 {
            return Err(Error::dim("max_pool2d: empty plane"));
        }
        let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * t * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..c * t {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = base;
                    for dy in 0..3 {
                        let iy = (oy * 2 + dy) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let ix = (ox * 2 + dx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                bi = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(bi);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, t, ho, wo], out)?, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Mean over the two trailing (spatial) axes: `[C, T, H, W] -> [C, T]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, t, hw) = match self.shape(x) {
            &[a, b, h, w] => (a, b, h * w),
            s => return Err(Error::dim(format!("spatial_mean input must be 4-D, got {s:?}"))),
        };
        let inv = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, t], out)?, Op::SpatialMean { x, hw }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { leaf, params: self.param_vars.clone() })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        axpy(s, g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, g, T::one());
                }
                if let Some(s) = self.slot(grads, *b) {
                    axpy(s, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, &gg), &y) in s.iter_mut().zip(g).zip(bv) {
                        *s += gg * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, &gg), &x) in s.iter_mut().zip(g).zip(av) {
                        *s += gg * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, g, *c);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, T::one());
                }
                let c = self.value(*b).numel();
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks(c.max(1)) {
                        axpy(s, row, T::one());
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("2-D");
                if let Some(s) = self.slot(grads, *x) {
                    // g is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, T::one());
                }
            }
            Op::Gelu { x, d } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, &gg), &dv) in s.iter_mut().zip(g).zip(d) {
                        *s += gg * dv;
                    }
                }
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x).data();
                let a = self.value(*slope).data();
                let per = xv.len() / a.len();
                if let Some(s) = self.slot(grads, *x) {
                    for (c, (sc, (gc, xc))) in s.chunks_mut(per).zip(g.chunks(per).zip(xv.chunks(per))).enumerate() {
                        let ac = a[c];
                        for ((s, &gg), &v) in sc.iter_mut().zip(gc).zip(xc) {
                            *s += if v > T::zero() { gg } else { gg * ac };
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *slope) {
                    for (c, (gc, xc)) in g.chunks(per).zip(xv.chunks(per)).enumerate() {
                        let mut acc = T::zero();
                        for (&gg, &v) in gc.iter().zip(xc) {
                            if v <= T::zero() {
                                acc += gg * v;
                            }
                        }
                        s[c] += acc;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                if let Some(s) = self.slot(grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                if let Some(s) = self.slot(grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: T = grow.iter().copied().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Norm { x, gamma, beta, per_row, xhat, rstd } => {
                let (r, c) = node.value.dims2().expect("2-D");
                let gm = self.value(*gamma).data();
                let rows = || g.chunks(c).zip(xhat.chunks(c)).take(r);
                if let Some(s) = self.slot(grads, *x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    let mut dh = vec![T::zero(); c];
                    for (i, ((gr, hr), sr)) in rows().zip(s.chunks_mut(c)).enumerate() {
                        if *per_row {
                            let gi = gm[i];
                            dh.iter_mut().zip(gr).for_each(|(d, &gg)| *d = gg * gi);
                        } else {
                            dh.iter_mut().zip(gr).zip(gm).for_each(|((d, &gg), &gj)| *d = gg * gj);
                        }
                        let m1 = dh.iter().copied().sum::<T>() * inv_c;
                        let m2 = dh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() * inv_c;
                        let rs = rstd[i];
                        for ((sv, &d), &h) in sr.iter_mut().zip(&dh).zip(hr) {
                            *sv += rs * (d - m1 - h * m2);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for (i, (gr, hr)) in rows().enumerate() {
                        if *per_row {
                            s[i] += gr.iter().zip(hr).map(|(&gg, &h)| gg * h).sum::<T>();
                        } else {
                            s.iter_mut().zip(gr).zip(hr).for_each(|((sv, &gg), &h)| *sv += gg * h);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for (i, gr) in g.chunks(c).take(r).enumerate() {
                        if *per_row {
                            s[i] += gr.iter().copied().sum::<T>();
                        } else {
                            s.iter_mut().zip(gr).for_each(|(sv, &gg)| *sv += gg);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, &gg), &m) in s.iter_mut().zip(g).zip(mask) {
                        *s += gg * m;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(s) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if let Some(s) = self.slot(grads, x) {
                        for i in 0..rows {
                            axpy(&mut s[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c], T::one());
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = node.value.dims2().expect("2-D");
                let c = self.value(*x).shape()[1];
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..r {
                        axpy(&mut s[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len], T::one());
                    }
                }
            }
            Op::ReplaceRows { x, emb, rows } => {
                let c = node.value.shape()[1];
                if let Some(s) = self.slot(grads, *x) {
                    let r = s.len() / c.max(1);
                    let mut replaced = vec![false; r];
                    for &i in rows {
                        replaced[i] = true;
                    }
                    for i in (0..r).filter(|&i| !replaced[i]) {
                        axpy(&mut s[i * c..(i + 1) * c], &g[i * c..(i + 1) * c], T::one());
                    }
                }
                if let Some(s) = self.slot(grads, *emb) {
                    for &i in rows {
                        axpy(s, &g[i * c..(i + 1) * c], T::one());
                    }
                }
            }
            Op::WeightedRowSum { x, w } => {
                let c = self.value(*x).shape()[1];
                if let Some(s) = self.slot(grads, *x) {
                    for (i, row) in s.chunks_mut(c.max(1)).enumerate() {
                        let k = g[0] * w[i];
                        for v in row {
                            *v += k;
                        }
                    }
                }
            }
            Op::Nll { logp, targets, w } => {
                let c = self.value(*logp).shape()[1];
                if let Some(s) = self.slot(grads, *logp) {
                    for (i, &t) in targets.iter().enumerate() {
                        s[i * c + t] -= g[0] * w[i];
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for v in s.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                let n = T::lit(self.value(*x).numel().max(1) as f64);
                if let Some(s) = self.slot(grads, *x) {
                    for v in s.iter_mut() {
                        *v += g[0] / n;
                    }
                }
            }
            Op::Conv3d { x, w, geom, cols } if geom.shifted() => {
                let fg = geom.frame_geom();
                let (kd, np) = (fg.kdim(), fg.npos());
                let hw = geom.out[1] * geom.out[2];
                let ny = geom.npos();
                let wv = self.value(*w).data();
                let need_x = self.nodes[x.0].requires_grad;
                let mut dcols = if need_x { vec![T::zero(); kd * np] } else { Vec::new() };
                let khw = geom.k[1] * geom.k[2];
                for dt in 0..geom.k[0] {
                    let (lo, hi) = geom.shift_range(dt);
                    if lo == hi {
                        continue;
                    }
                    let n = (hi - lo) * hw;
                    let src = (lo + dt - geom.pad[0]) * hw;
                    let gy = MatView::sub_cols(g, geom.cout, ny, lo * hw, n);
                    if let Some(s) = self.slot(grads, *w) {
                        let mut dw = vec![T::zero(); geom.cout * kd];
                        gemm_into(gy, MatView::sub_cols(cols, kd, np, src, n).t(), T::zero(), &mut dw, kd as isize, 1);
                        for co in 0..geom.cout {
                            for ci in 0..geom.cin {
                                let base = ((co * geom.cin + ci) * geom.k[0] + dt) * khw;
                                let from = &dw[co * kd + ci * khw..co * kd + (ci + 1) * khw];
                                for (d, &v) in s[base..base + khw].iter_mut().zip(from) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    if need_x {
                        let wt = geom.tap_weights(wv, dt);
                        gemm_into(
                            MatView::new(&wt, geom.cout, kd, true),
                            gy,
                            T::one(),
                            &mut dcols[src..],
                            np as isize,
                            1,
                        );
                    }
                }
                if need_x {
                    if let Some(s) = self.slot(grads, *x) {
                        col2im(&dcols, &fg, s);
                    }
                }
            }
            Op::Conv3d { x, w, geom, cols } => {
                let (kd, np) = (geom.kdim(), geom.npos());
                if let Some(s) = self.slot(grads, *w) {
                    gemm_into(
                        MatView::new(g, geom.cout, np, false),
                        MatView::new(cols, kd, np, true),
                        T::one(),
                        s,
                        kd as isize,
                        1,
                    );
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); kd * np];
                    gemm_into(
                        MatView::new(self.value(*w).data(), geom.cout, kd, true),
                        MatView::new(g, geom.cout, np, false),
                        T::zero(),
                        &mut dcols,
                        np as isize,
                        1,
                    );
                    if let Some(s) = self.slot(grads, *x) {
                        col2im(&dcols, geom, s);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&gg, &i) in g.iter().zip(argmax) {
                        s[i] += gg;
                    }
                }
            }
            Op::SpatialMean { x, hw } => {
                let inv = T::one() / T::lit(*hw as f64);
                if let Some(s) = self.slot(grads, *x) {
                    for (plane, &gg) in s.chunks_mut(*hw).zip(g) {
                        for v in plane {
                            *v += gg * inv;
                        }
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (ar, ac) = self.value(a).dims2().expect("2-D");
        let (br, bc) = self.value(b).dims2().expect("2-D");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let gv = MatView::new(g, m, n, false);
        if self.nodes[a.0].requires_grad {
            let bv = self.value(b).data();
            if let Some(s) = self.slot(grads, a) {
                // d op(a) = g op(b)^T, [m x k]
                let (rs, cs) = if ta { (1, m as isize) } else { (k as isize, 1) };
                gemm_into(gv, MatView::new(bv, br, bc, !tb), T::one(), s, rs, cs);
            }
        }
        if self.nodes[b.0].requires_grad {
            let av = self.value(a).data();
            if let Some(s) = self.slot(grads, b) {
                // d op(b) = op(a)^T g, [k x n]
                let (rs, cs) = if tb { (1, k as isize) } else { (n as isize, 1) };
                gemm_into(MatView::new(av, ar, ac, !ta), gv, T::one(), s, rs, cs);
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// tanh-approximate GELU and its derivative.
fn gelu_fwd<T: Real>(x: T) -> (T, T) {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = s * (T::one() + T::lit(3.0) * c * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

/// Output indices `lo..hi` whose input coordinate `o*stride + off - pad` lies in `0..n`.
fn valid_range(n_out: usize, stride: usize, off: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(off).div_ceil(stride);
    let hi = if n + pad > off { (n + pad - off).div_ceil(stride).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

/// Visit every (patch row, output position, input offset) triple of a valid tap.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let np = g.npos();
    let [to, ho, wo] = g.out;
    let mut row = 0;
    for ci in 0..g.cin {
        for dt in 0..g.k[0] {
            let (t0, t1) = valid_range(to, g.stride[0], dt, g.pad[0], g.t);
            for dy in 0..g.k[1] {
                let (y0, y1) = valid_range(ho, g.stride[1], dy, g.pad[1], g.h);
                for dx in 0..g.k[2] {
                    let (x0, x1) = valid_range(wo, g.stride[2], dx, g.pad[2], g.w);
                    for ot in t0..t1 {
                        let it = ot * g.stride[0] + dt - g.pad[0];
                        for oy in y0..y1 {
                            let iy = oy * g.stride[1] + dy - g.pad[1];
                            let dst = row * np + (ot * ho + oy) * wo;
                            let src = ((ci * g.t + it) * g.h + iy) * g.w + dx + x0 * g.stride[2] - g.pad[2];
                            f(dst + x0, src, x1 - x0, g.stride[2]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.kdim() * g.npos()];
    for_each_tap(g, |dst, src, n, sw| {
        for (i, d) in cols[dst..dst + n].iter_mut().enumerate() {
            *d = x[src + i * sw];
        }
    });
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx_out: &mut [T]) {
    for_each_tap(g, |dst, src, n, sw| {
        for (i, &c) in cols[dst..dst + n].iter().enumerate() {
            dx_out[src + i * sw] += c;
        }
    });
}

/// Unit-temporal-stride convolution as shifted 2-D products; returns the
/// per-frame patch matrix and the output.
fn conv_shifted<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let fg = g.frame_geom();
    let cols = im2col(x, &fg);
    let (kd, np) = (fg.kdim(), fg.npos());
    let hw = g.out[1] * g.out[2];
    let ny = g.npos();
    let mut y = vec![T::zero(); g.cout * ny];
    for dt in 0..g.k[0] {
        let (lo, hi) = g.shift_range(dt);
        if lo == hi {
            continue;
        }
        let n = (hi - lo) * hw;
        let wt = g.tap_weights(w, dt);
        gemm_into(
            MatView::new(&wt, g.cout, kd, false),
            MatView::sub_cols(&cols, kd, np, (lo + dt - g.pad[0]) * hw, n),
            T::one(),
            &mut y[lo * hw..],
            ny as isize,
            1,
        );
    }
    (cols, y)
}
