//! Dense row-major matrices and the handful of kernels the model needs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Row-major matrix. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        axpy(S::one(), &other.data, &mut self.data);
    }

    pub fn scale(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// `self · rhs` for a right-hand side stored in input-major (`in x out`) layout.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, rhs.cols);
        matmul_acc(&mut out.data, &self.data, self.rows, self.cols, &rhs.data, rhs.cols);
        out
    }
}

/// `y += a * x`
#[inline]
pub fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out (t x n) += x (t x k) · w (k x n)`
pub fn matmul_acc<S: Scalar>(out: &mut [S], x: &[S], t: usize, k: usize, w: &[S], n: usize) {
    debug_assert_eq!(out.len(), t * n);
    debug_assert_eq!(x.len(), t * k);
    debug_assert_eq!(w.len(), k * n);
    for r in 0..t {
        let orow = &mut out[r * n..(r + 1) * n];
        let xrow = &x[r * k..(r + 1) * k];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi != S::zero() {
                axpy(xi, &w[i * n..(i + 1) * n], orow);
            }
        }
    }
}

/// `dx (t x k) += dy (t x n) · wᵀ` where `w` is `k x n`.
pub fn matmul_transb_acc<S: Scalar>(dx: &mut [S], dy: &[S], t: usize, n: usize, w: &[S], k: usize) {
    debug_assert_eq!(dx.len(), t * k);
    debug_assert_eq!(dy.len(), t * n);
    debug_assert_eq!(w.len(), k * n);
    for r in 0..t {
        let dyrow = &dy[r * n..(r + 1) * n];
        let dxrow = &mut dx[r * k..(r + 1) * k];
        for (i, d) in dxrow.iter_mut().enumerate() {
            *d += dot(dyrow, &w[i * n..(i + 1) * n]);
        }
    }
}

/// `dw (k x n) += xᵀ (k x t) · dy (t x n)`
pub fn matmul_transa_acc<S: Scalar>(dw: &mut [S], x: &[S], t: usize, k: usize, dy: &[S], n: usize) {
    debug_assert_eq!(dw.len(), k * n);
    debug_assert_eq!(x.len(), t * k);
    debug_assert_eq!(dy.len(), t * n);
    for r in 0..t {
        let dyrow = &dy[r * n..(r + 1) * n];
        let xrow = &x[r * k..(r + 1) * k];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi != S::zero() {
                axpy(xi, dyrow, &mut dw[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Numerically stable `log Σ exp`.
pub fn logsumexp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    let s: S = row.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}

/// In-place softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    let inv = S::one() / s;
    row.iter_mut().for_each(|z| *z *= inv);
}

pub fn softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let mut v = row.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
