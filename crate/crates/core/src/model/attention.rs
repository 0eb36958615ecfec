//! Multi-head attention kernels.
//!
//! Attention weights of the sparse kernel are stored aligned with the
//! mask's per-row column lists: the weight of head `h` for the `t`-th
//! allowed column of row `r` lives at `(mask.row_offset(r) + t) * heads + h`.
//! The backward pass always works on that layout.

use super::layers::linear_fwd;
use super::params::Block;
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::tensor::{axpy, dot, Mat, Real};

/// How scores are turned into weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Kernel {
    /// Scores only for allowed pairs.
    #[default]
    Sparse,
    /// Dense scores with an additive `-1e30` mask, disallowed weights zeroed.
    Dense,
    /// Plain softmax attention; the mask is ignored.
    Unmasked,
}

const NEG_BIG: f64 = -1e30;

fn check_shapes<F: Real>(q: &Mat<F>, k: &Mat<F>, v: &Mat<F>, heads: usize) {
    assert!(heads >= 1 && q.cols.is_multiple_of(heads), "head split");
    assert_eq!((k.rows, k.cols), (q.rows, q.cols), "key shape");
    assert_eq!((v.rows, v.cols), (q.rows, q.cols), "value shape");
}

fn check_mask(mask: &MaskMatrix, n: usize) -> Result<()> {
    if mask.n() != n {
        return Err(Error::Shape(format!("mask covers {} tokens, input has {n}", mask.n())));
    }
    if let Some(r) = mask.first_inert_row() {
        return Err(Error::InertRow {
            row: mask.positions()[r],
        });
    }
    Ok(())
}

/// Returns the concatenated head outputs (before `W_O`) and the weights in
/// mask-aligned layout.
pub fn sparse_kernel<F: Real>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    mask: &MaskMatrix,
    heads: usize,
) -> Result<(Mat<F>, Vec<F>)> {
    check_shapes(q, k, v, heads);
    check_mask(mask, q.rows)?;
    let d = q.cols;
    let dk = d / heads;
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut w = vec![F::zero(); mask.pair_count() * heads];
    let mut ctx = Mat::zeros(q.rows, d);
    let mut scores: Vec<F> = Vec::new();
    for r in 0..q.rows {
        let cols = mask.row(r);
        let off = mask.row_offset(r);
        for h in 0..heads {
            let hs = h * dk..(h + 1) * dk;
            let qh = &q.row(r)[hs.clone()];
            scores.clear();
            let mut max = F::neg_infinity();
            for &c in cols {
                let s = dot(qh, &k.row(c)[hs.clone()]) * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut sum = F::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let out = &mut ctx.row_mut(r)[hs.clone()];
            for (t, &c) in cols.iter().enumerate() {
                let p = scores[t] / sum;
                w[(off + t) * heads + h] = p;
                axpy(p, &v.row(c)[hs.clone()], out);
            }
        }
    }
    Ok((ctx, w))
}

/// Dense reference. With a mask, disallowed scores get `-1e30` and their
/// weights are then set to exactly zero. Weights are `heads × n × n`.
pub fn dense_kernel<F: Real>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    mask: Option<&MaskMatrix>,
    heads: usize,
) -> Result<(Mat<F>, Vec<F>)> {
    check_shapes(q, k, v, heads);
    let n = q.rows;
    let allowed = match mask {
        Some(m) => {
            check_mask(m, n)?;
            m.to_dense()
        }
        None => vec![true; n * n],
    };
    let d = q.cols;
    let dk = d / heads;
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut w = vec![F::zero(); heads * n * n];
    let mut ctx = Mat::zeros(n, d);
    for h in 0..heads {
        let hs = h * dk..(h + 1) * dk;
        for r in 0..n {
            let row = &mut w[(h * n + r) * n..(h * n + r + 1) * n];
            let qh = &q.row(r)[hs.clone()];
            for c in 0..n {
                let bias = if allowed[r * n + c] { F::zero() } else { F::of(NEG_BIG) };
                row[c] = dot(qh, &k.row(c)[hs.clone()]) * scale + bias;
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for (c, s) in row.iter_mut().enumerate() {
                *s = if allowed[r * n + c] { *s / sum } else { F::zero() };
            }
            let out = &mut ctx.row_mut(r)[hs.clone()];
            for c in 0..n {
                if row[c] != F::zero() {
                    axpy(row[c], &v.row(c)[hs.clone()], out);
                }
            }
        }
    }
    Ok((ctx, w))
}

/// Gathers dense `heads × n × n` weights into mask-aligned layout.
pub fn dense_to_aligned<F: Real>(dense: &[F], mask: &MaskMatrix, heads: usize) -> Vec<F> {
    let n = mask.n();
    let mut w = vec![F::zero(); mask.pair_count() * heads];
    for r in 0..n {
        let off = mask.row_offset(r);
        for (t, &c) in mask.row(r).iter().enumerate() {
            for h in 0..heads {
                w[(off + t) * heads + h] = dense[(h * n + r) * n + c];
            }
        }
    }
    w
}

/// Scatters mask-aligned weights into a dense `heads × n × n` tensor.
pub fn aligned_to_dense<F: Real>(w: &[F], mask: &MaskMatrix, heads: usize) -> Vec<F> {
    let n = mask.n();
    let mut dense = vec![F::zero(); heads * n * n];
    for r in 0..n {
        let off = mask.row_offset(r);
        for (t, &c) in mask.row(r).iter().enumerate() {
            for h in 0..heads {
                dense[(h * n + r) * n + c] = w[(off + t) * heads + h];
            }
        }
    }
    dense
}

/// Gradients of the kernel with respect to `q`, `k`, `v`.
pub fn kernel_bwd<F: Real>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    mask: &MaskMatrix,
    w: &[F],
    dctx: &Mat<F>,
    heads: usize,
) -> (Mat<F>, Mat<F>, Mat<F>) {
    let n = q.rows;
    let d = q.cols;
    let dk = d / heads;
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut dq = Mat::zeros(n, d);
    let mut dkm = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut dp: Vec<F> = Vec::new();
    for r in 0..n {
        let cols = mask.row(r);
        let off = mask.row_offset(r);
        for h in 0..heads {
            let hs = h * dk..(h + 1) * dk;
            let g = &dctx.row(r)[hs.clone()];
            dp.clear();
            let mut s = F::zero();
            for (t, &c) in cols.iter().enumerate() {
                let x = dot(g, &v.row(c)[hs.clone()]);
                s += w[(off + t) * heads + h] * x;
                dp.push(x);
            }
            for (t, &c) in cols.iter().enumerate() {
                let p = w[(off + t) * heads + h];
                let ds = p * (dp[t] - s) * scale;
                axpy(ds, &k.row(c)[hs.clone()], &mut dq.row_mut(r)[hs.clone()]);
                axpy(ds, &q.row(r)[hs.clone()], &mut dkm.row_mut(c)[hs.clone()]);
                axpy(p, g, &mut dv.row_mut(c)[hs.clone()]);
            }
        }
    }
    (dq, dkm, dv)
}

fn project<F: Real>(x: &Mat<F>, layer: &Block<F>) -> (Mat<F>, Mat<F>, Mat<F>) {
    (
        linear_fwd(x, &layer.q),
        linear_fwd(x, &layer.k),
        linear_fwd(x, &layer.v),
    )
}

/// Dense masked attention `softmax(Q Kᵀ / sqrt(d_k) + M) V W_O` using the
/// attention weights of `layer`. Returns the output and the dense weights.
pub fn masked_attention<F: Real>(
    x: &Mat<F>,
    mask: &MaskMatrix,
    layer: &Block<F>,
    heads: usize,
) -> Result<(Mat<F>, Vec<F>)> {
    let (q, k, v) = project(x, layer);
    let (ctx, w) = dense_kernel(&q, &k, &v, Some(mask), heads)?;
    Ok((linear_fwd(&ctx, &layer.o), w))
}

/// Same contract as [`masked_attention`], computed only over allowed pairs.
/// Returns the output and the number of scored pairs.
pub fn sparse_attention<F: Real>(
    x: &Mat<F>,
    mask: &MaskMatrix,
    layer: &Block<F>,
    heads: usize,
) -> Result<(Mat<F>, usize)> {
    let (q, k, v) = project(x, layer);
    let (ctx, _) = sparse_kernel(&q, &k, &v, mask, heads)?;
    Ok((linear_fwd(&ctx, &layer.o), mask.pair_count()))
}

/// Standard softmax attention with no mask at all.
pub fn unmasked_attention<F: Real>(x: &Mat<F>, layer: &Block<F>, heads: usize) -> (Mat<F>, Vec<F>) {
    let (q, k, v) = project(x, layer);
    let (ctx, w) = dense_kernel(&q, &k, &v, None, heads).expect("no mask, no inert rows");
    (linear_fwd(&ctx, &layer.o), w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_scores_split_evenly() {
        let q = Mat::from_vec(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let v = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mask = MaskMatrix::all_allowed(2);
        let (ctx, w) = sparse_kernel(&q, &q, &v, &mask, 1).unwrap();
        assert_eq!(&w[0..2], &[0.5, 0.5]);
        assert_eq!(ctx.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn singleton_row_copies_value() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = Mat::from_vec(3, 4, x.clone());
        let k = Mat::from_vec(3, 4, x.iter().map(|v| v * 2.0).collect());
        let v = Mat::from_vec(3, 4, x.iter().map(|v| v - 1.0).collect());
        let mask = MaskMatrix::from_rows(vec![0, 1, 2], vec![vec![0, 1, 2], vec![1], vec![0, 2]]).unwrap();
        let (ctx, _) = sparse_kernel(&q, &k, &v, &mask, 2).unwrap();
        assert_eq!(ctx.row(1), v.row(1));
    }

    #[test]
    fn inert_row_is_an_error() {
        let q: Mat<f64> = Mat::zeros(2, 2);
        let mask = MaskMatrix::from_rows(vec![5, 6], vec![vec![0], vec![]]).unwrap();
        let err = sparse_kernel(&q, &q, &q, &mask, 1).unwrap_err();
        assert!(err.to_string().contains("inert attention row"));
    }
}
