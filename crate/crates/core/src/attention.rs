//! Dense multi-head scaled dot-product attention kernels (forward and backward).

use crate::error::{shape_err, Result};
use crate::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_row, softmax_row_backward};
use crate::tensor::Scalar;

/// Additive score for disallowed query/key pairs.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionShape {
    pub len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn new(len: usize, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(shape_err(format!("hidden {hidden} not divisible by {heads} heads")));
        }
        Ok(Self {
            len,
            hidden,
            heads,
            head_dim: hidden / heads,
        })
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Columns of head `h` for the given rows, as a contiguous `[rows.len(), head_dim]` block.
pub(crate) fn head_rows<T: Scalar>(x: &[T], s: AttentionShape, h: usize, rows: impl Iterator<Item = usize>) -> Vec<T> {
    let mut out = Vec::new();
    for r in rows {
        let start = r * s.hidden + h * s.head_dim;
        out.extend_from_slice(&x[start..start + s.head_dim]);
    }
    out
}

/// Adds a `[rows.len(), head_dim]` block into head `h` of `dst` at the given rows.
pub(crate) fn add_head_rows<T: Scalar>(
    dst: &mut [T],
    s: AttentionShape,
    h: usize,
    rows: impl Iterator<Item = usize>,
    block: &[T],
) {
    for (i, r) in rows.enumerate() {
        let start = r * s.hidden + h * s.head_dim;
        let src = &block[i * s.head_dim..(i + 1) * s.head_dim];
        for (d, &v) in dst[start..start + s.head_dim].iter_mut().zip(src) {
            *d += v;
        }
    }
}

/// Scores `q·kᵀ·scale + mask`, softmaxed row-wise. `masked(i, j)` marks disallowed pairs.
pub(crate) fn attention_probs<T: Scalar>(
    qh: &[T],
    kh: &[T],
    rows: usize,
    keys: usize,
    head_dim: usize,
    scale: f64,
    masked: impl Fn(usize, usize) -> bool,
) -> Vec<T> {
    let mut scores = vec![T::zero(); rows * keys];
    gemm_nt(qh, kh, &mut scores, rows, head_dim, keys);
    let (scale, neg) = (T::of(scale), T::of(MASKED_SCORE));
    for i in 0..rows {
        let row = &mut scores[i * keys..(i + 1) * keys];
        for (j, s) in row.iter_mut().enumerate() {
            *s *= scale;
            if masked(i, j) {
                *s += neg;
            }
        }
        softmax_row(row);
    }
    scores
}

/// Gradients of one attention head given its probabilities.
/// Returns `(dq, dk, dv)` blocks shaped like `qh`, `kh`, `vh`.
pub(crate) fn head_backward<T: Scalar>(
    qh: &[T],
    kh: &[T],
    vh: &[T],
    probs: &[T],
    d_out: &[T],
    rows: usize,
    keys: usize,
    head_dim: usize,
    scale: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dp = vec![T::zero(); rows * keys];
    gemm_nt(d_out, vh, &mut dp, rows, head_dim, keys);
    let mut dv = vec![T::zero(); keys * head_dim];
    gemm_tn(probs, d_out, &mut dv, rows, keys, head_dim);
    let scale = T::of(scale);
    for (prow, drow) in probs.chunks(keys).zip(dp.chunks_mut(keys)) {
        softmax_row_backward(prow, drow);
        for x in drow.iter_mut() {
            *x *= scale;
        }
    }
    let mut dq = vec![T::zero(); rows * head_dim];
    gemm_nn(&dp, kh, &mut dq, rows, keys, head_dim);
    let mut dk = vec![T::zero(); keys * head_dim];
    gemm_tn(&dp, qh, &mut dk, rows, keys, head_dim);
    (dq, dk, dv)
}

/// Full attention over `[len, hidden]` projections with an explicit
/// `[len, len]` permission mask. Returns the `[len, hidden]` context and the
/// `[heads, len, len]` probabilities.
pub fn dense_attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttentionShape,
    allowed: &[bool],
) -> (Vec<T>, Vec<T>) {
    let l = s.len;
    let mut out = vec![T::zero(); l * s.hidden];
    let mut probs = Vec::with_capacity(s.heads * l * l);
    for h in 0..s.heads {
        let qh = head_rows(q, s, h, 0..l);
        let kh = head_rows(k, s, h, 0..l);
        let vh = head_rows(v, s, h, 0..l);
        let p = attention_probs(&qh, &kh, l, l, s.head_dim, s.scale(), |i, j| !allowed[i * l + j]);
        let mut oh = vec![T::zero(); l * s.head_dim];
        gemm_nn(&p, &vh, &mut oh, l, l, s.head_dim);
        add_head_rows(&mut out, s, h, 0..l, &oh);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

pub fn dense_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttentionShape,
    probs: &[T],
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let l = s.len;
    let n = l * s.hidden;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    for h in 0..s.heads {
        let qh = head_rows(q, s, h, 0..l);
        let kh = head_rows(k, s, h, 0..l);
        let vh = head_rows(v, s, h, 0..l);
        let doh = head_rows(d_out, s, h, 0..l);
        let p = &probs[h * l * l..(h + 1) * l * l];
        let (dqh, dkh, dvh) = head_backward(&qh, &kh, &vh, p, &doh, l, l, s.head_dim, s.scale());
        add_head_rows(&mut dq, s, h, 0..l, &dqh);
        add_head_rows(&mut dk, s, h, 0..l, &dkh);
        add_head_rows(&mut dv, s, h, 0..l, &dvh);
    }
    (dq, dk, dv)
}
