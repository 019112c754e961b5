//! Dense primitives shared by every operator.
//!
//! Accumulation is always left to right in `f64`, whatever the storage type
//! of the operands. No pairwise or tree reductions: the same inputs give the
//! same bits on every run and every execution mode.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};

/// Probability clamp used by [`sigmoid`] and the logloss metric.
pub const PROB_EPSILON: f64 = 1e-15;

/// Element types that can be widened to `f64` for accumulation.
pub trait Scalar: Copy + Send + Sync + 'static {
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(DesError::Dimension(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DesError::Dimension(format!(
            "dot of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x.widen() * y.widen();
    }
    acc
}

/// `vᵀ W`: one output per column, rows accumulated in order.
pub fn matvec_t<A: Scalar, T: Scalar>(v: &[A], w: &DenseMatrix<T>) -> Result<DenseVector> {
    if v.len() != w.rows() {
        return Err(DesError::Dimension(format!(
            "vector of length {} against matrix with {} rows",
            v.len(),
            w.rows()
        )));
    }
    let mut out = vec![0.0; w.cols()];
    matvec_t_acc(v, w, &mut out);
    Ok(DenseVector(out))
}

/// Adds `vᵀ W` into `out`, row by row.
pub(crate) fn matvec_t_acc<A: Scalar, T: Scalar>(v: &[A], w: &DenseMatrix<T>, out: &mut [f64]) {
    debug_assert_eq!(v.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    for (r, vr) in v.iter().enumerate() {
        let vr = vr.widen();
        for (o, wrc) in out.iter_mut().zip(w.row(r)) {
            *o += vr * wrc.widen();
        }
    }
}

/// Logistic function clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]`.
pub fn sigmoid(z: f64) -> f64 {
    sigmoid_raw(z).clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Unclamped logistic function, evaluated without overflow for either sign.
pub fn sigmoid_raw(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy written in terms of the logit, `ln(1 + e^z) - y z`.
pub fn bce_with_logit(z: f64, label: f64) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - label * z
}
