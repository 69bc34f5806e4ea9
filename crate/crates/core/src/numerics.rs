//! Dense row-major matrices and the handful of kernels every layer is built from.
//!
//! Everything here is a pure function of its inputs. The checked entry points
//! (`matmul`, `softmax_rows`, `layer_norm`, ...) validate shapes and reject
//! non-finite results; the `pub(crate)` kernels skip those checks and are used
//! on the hot paths once shapes are known to be consistent.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating-point element type. `f64` everywhere except the 32-bit benchmark mode.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` on raw strided storage.
    ///
    /// # Safety
    /// All pointers must be valid for the given shapes and strides and `c`
    /// must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major matrix. Vectors (biases, norm gains) are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl Matrix<f64> {
    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        let mut out = self.clone();
        out.add_assign(other);
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sub", self.shape(), other.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a - *b).collect(),
        })
    }

    /// In-place elementwise sum; shapes must already agree.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scaled_add_assign(&mut self, s: T, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * *b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Self) {
        debug_assert_eq!(bias.rows, 1);
        debug_assert_eq!(bias.cols, self.cols);
        if self.cols == 0 {
            return;
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += *b;
            }
        }
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        if self.cols == 0 {
            return out;
        }
        for row in self.data.chunks_exact(self.cols) {
            for (o, x) in out.data.iter_mut().zip(row) {
                *o += *x;
            }
        }
        out
    }

    /// Copy of the row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of the column range `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Side-by-side concatenation `[a, b]`.
    pub fn hcat(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("hcat", (rows, 0), bad.shape()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacked concatenation `[a; b]`.
    pub fn vcat(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::shape("vcat", (0, cols), bad.shape()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows: data.len().checked_div(cols).unwrap_or(0),
            cols,
            data,
        })
    }

    pub(crate) fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }
}

/// Read-only strided window into matrix storage.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    pub(crate) fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[self.offset + i * self.rs + j * self.cs]
    }
}

/// `c = alpha * a * b + beta * c`, with `c` a dense row-major `m x n` buffer.
///
/// One to three left rows (greedy decode steps) take a direct row-streaming
/// kernel, which beats packing at that size; everything else goes through
/// `matrixmultiply`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    a.check();
    b.check();
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 || (m <= 3 && b.cs == 1) {
        if beta == T::zero() {
            c.iter_mut().for_each(|x| *x = T::zero());
        } else if beta != T::one() {
            c.iter_mut().for_each(|x| *x *= beta);
        }
        for p in 0..k {
            let brow = &b.data[b.offset + p * b.rs..b.offset + p * b.rs + n];
            for i in 0..m {
                let s = alpha * a.at(i, p);
                if s == T::zero() {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += s * *bv;
                }
            }
        }
        return;
    }
    // SAFETY: both views were bounds-checked above and `c` is a distinct
    // exclusive borrow of exactly m*n elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unchecked `a * b`.
pub(crate) fn mm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(T::one(), a.view(), b.view(), T::zero(), &mut out.data);
    out
}

/// Unchecked `a^T * b`.
#[cfg(test)]
pub(crate) fn mm_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm(T::one(), a.view().t(), b.view(), T::zero(), &mut out.data);
    out
}

/// Unchecked `a * b^T`.
pub(crate) fn mm_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(T::one(), a.view(), b.view().t(), T::zero(), &mut out.data);
    out
}

/// `acc += a^T * b`, used for weight gradients.
pub(crate) fn mm_tn_acc<T: Scalar>(acc: &mut Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) {
    debug_assert_eq!(acc.shape(), (a.cols, b.cols));
    gemm(T::one(), a.view().t(), b.view(), T::one(), &mut acc.data);
}

fn ensure_finite<T: Scalar>(m: Matrix<T>, op: &'static str) -> Result<Matrix<T>> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    ensure_finite(mm(a, b), "matmul")
}

/// Boolean mask with the same layout as the matrix it gates; `true` = visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "Mask::new",
                expected: rows * cols,
                actual: allowed.len(),
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    /// Lower-triangular mask: row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// In-place stable softmax over one row, restricted to `allowed` when given.
/// Masked entries come out exactly zero. Returns `false` if nothing is visible.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) -> bool {
    let visible = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if visible(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if visible(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    true
}

/// Row-wise softmax with optional visibility mask.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>, mask: Option<&Mask>) -> Result<Matrix<T>> {
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != m.shape() {
            return Err(Error::shape("softmax_rows", m.shape(), (mask.rows, mask.cols)));
        }
    }
    let mut out = m.clone();
    for i in 0..m.rows {
        if !softmax_in_place(out.row_mut(i), mask.map(|mk| mk.row(i))) {
            return Err(Error::FullyMaskedRow { row: i });
        }
    }
    ensure_finite(out, "softmax_rows")
}

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_fwd<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> (Matrix<T>, NormStats<T>) {
    let d = x.cols;
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut out = Matrix::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * r;
        }
        let o = &mut out.data[i * d..(i + 1) * d];
        for j in 0..d {
            o[j] = xhat.data[i * d + j] * gain.data[j] + bias.data[j];
        }
    }
    (out, NormStats { xhat, rstd })
}

/// Gradient of layer norm; accumulates into `dgain`/`dbias`, returns dx.
pub(crate) fn layer_norm_bwd<T: Scalar>(
    dy: &Matrix<T>,
    stats: &NormStats<T>,
    gain: &Matrix<T>,
    dgain: &mut Matrix<T>,
    dbias: &mut Matrix<T>,
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = stats.xhat.row(i);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain.data[j] += dyr[j] * xh[j];
            dbias.data[j] += dyr[j];
            dxhat[j] = dyr[j] * gain.data[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = stats.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Row-wise layer normalization followed by the affine `gain`/`bias`.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    if gain.len() != x.cols {
        return Err(Error::LengthMismatch {
            op: "layer_norm gain",
            expected: x.cols,
            actual: gain.len(),
        });
    }
    if bias.len() != x.cols {
        return Err(Error::LengthMismatch {
            op: "layer_norm bias",
            expected: x.cols,
            actual: bias.len(),
        });
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let (out, _) = layer_norm_fwd(x, &Matrix::row_vector(gain), &Matrix::row_vector(bias), eps);
    ensure_finite(out, "layer_norm")
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Uniform entries in `[-bound, bound]` from a seeded ChaCha stream.
pub fn uniform_init<T: Scalar>(rows: usize, cols: usize, bound: f64, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-bound..=bound)))
}

/// Glorot-uniform initialization with bound `sqrt(6 / (rows + cols))`.
pub fn xavier_init<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    assert!(rows >= 1 && cols >= 1, "xavier_init needs positive dimensions");
    uniform_init(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), seed)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            op: "cosine_similarity",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}
