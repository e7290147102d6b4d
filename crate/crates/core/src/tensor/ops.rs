use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::kernels::{gemm_nn, softmax_row};
use super::{Rng, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Matrix product over the last two axes.
///
/// `a: [.., m, k]` times `b: [k, n]` broadcasts `b` over the leading axes of `a`;
/// when both operands have the same rank above 2, their leading axes must match
/// and the products are taken pairwise.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err(format!(
            "matmul needs rank >= 2, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != kb {
        return Err(shape_err(format!(
            "inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let b_batched = br > 2;
    if b_batched && (br != ar || a.shape()[..ar - 2] != b.shape()[..br - 2]) {
        return Err(shape_err(format!(
            "batch extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a_blk = &a.data()[bi * m * k..(bi + 1) * m * k];
        let b_blk = if b_batched {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        } else {
            b.data()
        };
        gemm_nn(a_blk, b_blk, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
    }
    let mut shape = a.shape()[..ar - 2].to_vec();
    shape.extend([m, n]);
    Tensor::from_parts(shape, out).check_finite("matmul")
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        softmax_row(row);
    }
    Tensor::from_parts(x.shape().to_vec(), out).check_finite("softmax")
}

/// Per-row standardization over the last axis (biased variance), then `gamma * x̂ + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(format!(
            "layer_norm affine params {:?}/{:?} do not match last extent {c}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let stats = row_stats(row, eps);
        for (((d, &v), &g), &b) in dst.iter_mut().zip(row).zip(gamma.data()).zip(beta.data()) {
            *d = (v - stats.mean) * stats.rstd * g + b;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).check_finite("layer_norm")
}

pub(crate) struct RowStats<T> {
    pub mean: T,
    pub rstd: T,
}

pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: f64) -> RowStats<T> {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    RowStats {
        mean,
        rstd: T::one() / (var + T::of(eps)).sqrt(),
    }
}

/// Exact GELU, `x · Φ(x)`, evaluated in f64.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(gelu_scalar).check_finite("gelu")
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::of(0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
}

/// Derivative of exact GELU: `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * PI).sqrt();
    T::of(cdf + v * pdf)
}

/// Per-element multipliers for inverted dropout: 0 for dropped entries,
/// `1/(1-p)` for kept ones. `None` means the identity.
pub(crate) fn dropout_mask<T: Scalar>(
    n: usize,
    p: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Option<Vec<T>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok(Some(
        (0..n)
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect(),
    ))
}

/// Inverted dropout. In inference mode (or with `p == 0`) the input is returned unchanged.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor<T>> {
    match dropout_mask::<T>(x.len(), p, rng, training)? {
        None => Ok(x.clone()),
        Some(mask) => Ok(Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )),
    }
}
