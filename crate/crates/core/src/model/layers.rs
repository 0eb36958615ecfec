//! Per-token layers with hand-written backward passes.

use rand::Rng;

use super::params::{LayerNorm, Linear};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Mat, Real};

const LN_EPS: f64 = 1e-5;

pub fn linear_fwd<F: Real>(x: &Mat<F>, l: &Linear<F>) -> Mat<F> {
    let mut y = matmul(x, &l.w);
    for r in 0..y.rows {
        for (o, &b) in y.row_mut(r).iter_mut().zip(&l.b.data) {
            *o += b;
        }
    }
    y
}

/// Accumulates parameter gradients into `g` and returns `dx`.
pub fn linear_bwd<F: Real>(x: &Mat<F>, l: &Linear<F>, dy: &Mat<F>, g: &mut Linear<F>) -> Mat<F> {
    linear_bwd_params(x, dy, g);
    matmul_a_bt(dy, &l.w)
}

pub fn linear_bwd_params<F: Real>(x: &Mat<F>, dy: &Mat<F>, g: &mut Linear<F>) {
    matmul_at_b_acc(x, dy, &mut g.w);
    for r in 0..dy.rows {
        for (o, &d) in g.b.data.iter_mut().zip(dy.row(r)) {
            *o += d;
        }
    }
}

pub struct LnCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

pub fn layernorm_fwd<F: Real>(x: &Mat<F>, ln: &LayerNorm<F>) -> (Mat<F>, LnCache<F>) {
    let d = x.cols;
    let inv_d = F::of(1.0 / d as f64);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xhat.data[r * d + c] * ln.g.data[c] + ln.b.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layernorm_bwd<F: Real>(cache: &LnCache<F>, ln: &LayerNorm<F>, dy: &Mat<F>, g: &mut LayerNorm<F>) -> Mat<F> {
    let d = dy.cols;
    let inv_d = F::of(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = F::zero();
        let mut mean_dxh_xh = F::zero();
        for c in 0..d {
            g.g.data[c] += dyr[c] * xh[c];
            g.b.data[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.g.data[c];
            mean_dxh += dxhat[c];
            mean_dxh_xh += dxhat[c] * xh[c];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let rs = cache.rstd[r];
        let dxr = dx.row_mut(r);
        for c in 0..d {
            dxr[c] = rs * (dxhat[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

pub fn gelu_mat<F: Real>(x: &Mat<F>) -> Mat<F> {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect())
}

pub fn gelu_mat_bwd<F: Real>(pre: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
    Mat::from_vec(
        pre.rows,
        pre.cols,
        pre.data.iter().zip(&dy.data).map(|(&x, &d)| d * gelu_grad(x)).collect(),
    )
}

/// Inverted-dropout keep mask: each entry is 0 or `1 / (1 - p)`.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect()
}

pub fn apply_mask<F: Real>(x: &mut Mat<F>, mask: &[F]) {
    for (v, &m) in x.data.iter_mut().zip(mask) {
        *v *= m;
    }
}
