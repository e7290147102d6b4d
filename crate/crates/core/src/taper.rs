//! Position-table extension by attenuated repetition.
//!
//! An `l_src`-row table is extended to `r · l_src` rows by concatenating `r`
//! copies, copy `i` scaled by `(τr − i) / (τr)`. Copy 0 is the source table
//! unchanged; later copies shrink linearly, so equal-offset rows of different
//! copies stay distinguishable while keeping their direction.

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TAU: f64 = 2.0;

/// Scale applied to copy `i` of `r`: `(τr − i) / (τr)`.
///
/// Requires `i < r` and `τr > r − 1` so every factor is positive.
pub fn attenuation_factor(i: usize, r: usize, tau: f64) -> Result<f64> {
    if r == 0 || i >= r {
        return Err(invalid(format!("copy index {i} out of range for {r} repetitions")));
    }
    check_tau(tau, r)?;
    let tr = tau * r as f64;
    Ok((tr - i as f64) / tr)
}

fn check_tau(tau: f64, r: usize) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(invalid(format!("tau must be positive and finite, got {tau}")));
    }
    if tau * r as f64 <= (r - 1) as f64 {
        return Err(invalid(format!(
            "tau {tau} too small for {r} repetitions: the last copy would be scaled to zero or below"
        )));
    }
    Ok(())
}

/// All `r` factors in copy order.
pub fn attenuation_factors(r: usize, tau: f64) -> Result<Vec<f64>> {
    (0..r).map(|i| attenuation_factor(i, r, tau)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaperConfig {
    pub tau: f64,
    pub repetitions: usize,
}

impl TaperConfig {
    pub fn new(tau: f64, repetitions: usize) -> Result<Self> {
        if repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        check_tau(tau, repetitions)?;
        Ok(Self { tau, repetitions })
    }

    pub fn factors(&self) -> Vec<f64> {
        attenuation_factors(self.repetitions, self.tau).expect("validated at construction")
    }
}

fn extend_with<T: Scalar>(src: &Tensor<T>, factors: &[f64]) -> Result<Tensor<T>> {
    let (rows, width) = match src.shape() {
        [r, w] => (*r, *w),
        s => return Err(shape_err(format!("position table must be 2-D, got {s:?}"))),
    };
    let mut data = Vec::with_capacity(rows * width * factors.len());
    for &f in factors {
        let f = T::of(f);
        data.extend(src.data().iter().map(|&x| x * f));
    }
    Tensor::new(vec![rows * factors.len(), width], data)
}

/// `[l_src, h]` → `[r · l_src, h]` with copy `i` scaled by its attenuation factor.
/// Multiplication happens in the table's own precision.
pub fn extend_positions<T: Scalar>(src: &Tensor<T>, cfg: TaperConfig) -> Result<Tensor<T>> {
    extend_with(src, &cfg.factors())
}

/// Plain tiling: `r` unscaled copies.
pub fn repeat_positions<T: Scalar>(src: &Tensor<T>, repetitions: usize) -> Result<Tensor<T>> {
    if repetitions == 0 {
        return Err(invalid("repetitions must be at least 1"));
    }
    extend_with(src, &vec![1.0; repetitions])
}

/// Minimum L2 distance between equal-offset rows of two copies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CopyPairDistance {
    pub copy_a: usize,
    pub copy_b: usize,
    pub min_distance: f64,
    /// Offset `k` where the minimum occurs.
    pub argmin_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistinguishabilityReport {
    pub l_src: usize,
    pub repetitions: usize,
    pub pairs: Vec<CopyPairDistance>,
    /// Pairs `(a, b)` with a zero distance at some offset whose copy-0 row is nonzero.
    pub collisions: Vec<(usize, usize, usize)>,
}

impl DistinguishabilityReport {
    pub fn is_distinguishable(&self) -> bool {
        self.collisions.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("copy_a,copy_b,min_distance,argmin_offset\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{},{:e},{}\n", p.copy_a, p.copy_b, p.min_distance, p.argmin_offset));
        }
        out
    }
}

/// For every copy pair `a < b`, the minimum over offsets `k` of
/// `‖row(a·l_src + k) − row(b·l_src + k)‖₂`, computed in f64.
pub fn distinguishability_report<T: Scalar>(extended: &Tensor<T>, l_src: usize) -> Result<DistinguishabilityReport> {
    let (rows, width) = match extended.shape() {
        [r, w] => (*r, *w),
        s => return Err(shape_err(format!("position table must be 2-D, got {s:?}"))),
    };
    if l_src == 0 || rows % l_src != 0 {
        return Err(shape_err(format!("{rows} rows is not a multiple of l_src {l_src}")));
    }
    let r = rows / l_src;
    let row = |c: usize, k: usize| &extended.data()[(c * l_src + k) * width..(c * l_src + k + 1) * width];
    let mut pairs = Vec::new();
    let mut collisions = Vec::new();
    for a in 0..r {
        for b in a + 1..r {
            let mut best = (f64::INFINITY, 0);
            for k in 0..l_src {
                let d = row(a, k)
                    .iter()
                    .zip(row(b, k))
                    .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d == 0.0 && row(0, k).iter().any(|x| *x != T::zero()) {
                    collisions.push((a, b, k));
                }
                if d < best.0 {
                    best = (d, k);
                }
            }
            pairs.push(CopyPairDistance {
                copy_a: a,
                copy_b: b,
                min_distance: best.0,
                argmin_offset: best.1,
            });
        }
    }
    Ok(DistinguishabilityReport {
        l_src,
        repetitions: r,
        pairs,
        collisions,
    })
}
