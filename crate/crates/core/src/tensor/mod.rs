//! Dense row-major tensors and the reverse-mode tape built on top of them.

mod gradcheck;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, GradEntry};
pub use tape::{Gradients, MatOp, Tape, Var};

/// Floating point element type. Training runs in `f32`; `f64` exists for
/// gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self;

    fn to_f64c(self) -> f64;

    /// `C = alpha * A B + beta * C` over strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn to_f64c(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }

    fn to_f64c(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only matrix view used by the GEMM helpers.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatView<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, transposed: bool) -> Self {
        // `data` is stored row-major as rows x cols before any transpose.
        if transposed {
            MatView { data, rows: cols, cols: rows, rs: 1, cs: cols as isize }
        } else {
            MatView { data, rows, cols, rs: cols as isize, cs: 1 }
        }
    }

    /// Columns `start..start + n` of a row-major `rows x total` matrix.
    pub fn sub_cols(data: &'a [T], rows: usize, total: usize, start: usize, n: usize) -> Self {
        MatView { data: &data[start..], rows, cols: n, rs: total as isize, cs: 1 }
    }

    /// Same view, transposed.
    pub fn t(self) -> Self {
        MatView { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn extent(&self) -> usize {
        extent(self.rows, self.cols, self.rs, self.cs)
    }
}

/// One past the largest offset touched by a `rows x cols` strided matrix.
fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

/// `out (m x n, strides rso/cso) = a b + beta * out`.
pub(crate) fn gemm_into<T: Real>(
    a: MatView<'_, T>,
    b: MatView<'_, T>,
    beta: T,
    out: &mut [T],
    rso: isize,
    cso: isize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= extent(m, n, rso, cso), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = i * rso as usize + j * cso as usize;
                out[o] *= beta;
            }
        }
        return;
    }
    assert!(a.data.len() >= a.extent() && b.data.len() >= b.extent(), "gemm input out of bounds");
    // SAFETY: bounds asserted above; out is a distinct &mut borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            rso,
            cso,
        );
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(std * crate::rng::normal(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(Error::dim(format!("row range {start}..{end} out of {r}")));
        }
        Tensor::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.to_f64c())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64c() - b.to_f64c()).abs())
            .fold(0.0, f64::max)
    }
}

/// Plain (non-recording) matrix product, used by inference-only paths.
pub fn matmul_plain<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_into(
        MatView::new(a.data(), m, k, false),
        MatView::new(b.data(), k, n, false),
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn nan_is_detectable() {
        let t = Tensor::<f64>::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(!t.is_finite());
        assert!(matches!(t.ensure_finite("t"), Err(Error::Numeric(_))));
    }

    #[test]
    fn plain_matmul_transposed_views() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let mut out = vec![0.0; 4];
        gemm_into(
            MatView::new(a.data(), 2, 3, false),
            MatView::new(a.data(), 2, 3, true),
            0.0,
            &mut out,
            2,
            1,
        );
        assert_eq!(out, vec![14., 32., 32., 77.]);
    }
}
