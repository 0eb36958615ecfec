//! Minimal row-major matrix type and the handful of kernels the model needs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point scalar the model is generic over. Training runs in `f32`,
/// gradient verification in `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn cast<G: Real>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a: n×k`, `b: n×m`, accumulated into `out: k×m`.
pub fn matmul_at_b_acc<F: Real>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    assert_eq!(a.rows, b.rows, "matmul_at_b outer dimension");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_at_b output");
    for n in 0..a.rows {
        let arow = a.row(n);
        let brow = b.row(n);
        for (k, &ank) in arow.iter().enumerate() {
            if ank == F::zero() {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bnj) in orow.iter_mut().zip(brow) {
                *o += ank * bnj;
            }
        }
    }
}

/// `a · bᵀ` for `a: n×m`, `b: k×m`.
pub fn matmul_a_bt<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.cols, b.cols, "matmul_a_bt inner dimension");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    out
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
