//! Tensor primitives against naive reference implementations.

use proptest::prelude::*;
use taperkit::tensor::{gelu, layer_norm, matmul, softmax_lastdim, Tensor};

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Standard normal CDF by composite Simpson integration of the density from 0.
fn phi(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((m, k, n, a, b) in (1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
    {
        let c = matmul(&Tensor::new(vec![m, k], a.clone()).unwrap(), &Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        let want = triple_loop(&a, &b, m, k, n);
        for (x, y) in c.data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matmul_broadcasts_rhs((batch, m, k, n, a, b) in (1usize..4, 1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(batch, m, k, n)| (Just(batch), Just(m), Just(k), Just(n), values(batch * m * k), values(k * n))))
    {
        let c = matmul(&Tensor::new(vec![batch, m, k], a.clone()).unwrap(), &Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        prop_assert_eq!(c.shape(), &[batch, m, n]);
        for i in 0..batch {
            let want = triple_loop(&a[i * m * k..(i + 1) * m * k], &b, m, k, n);
            for (x, y) in c.data()[i * m * n..(i + 1) * m * n].iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_matches_definition_and_ignores_shifts(row in values(9), shift in -50.0f64..50.0) {
        let x = Tensor::new(vec![1, 9], row.clone()).unwrap();
        let p = softmax_lastdim(&x).unwrap();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (pi, v) in p.data().iter().zip(&row) {
            prop_assert!((pi - v.exp() / z).abs() < 1e-12);
        }
        let shifted = softmax_lastdim(&x.map(|v| v + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_naive(rows in values(12), gamma in values(4), beta in values(4)) {
        let x = Tensor::new(vec![3, 4], rows.clone()).unwrap();
        let y = layer_norm(&x, &Tensor::new(vec![4], gamma.clone()).unwrap(), &Tensor::new(vec![4], beta.clone()).unwrap(), 1e-5).unwrap();
        for r in 0..3 {
            let row = &rows[r * 4..(r + 1) * 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c];
                prop_assert!((y.data()[r * 4 + c] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gelu_matches_integrated_cdf(x in -6.0f64..6.0) {
        let got = gelu(&Tensor::new(vec![1], vec![x]).unwrap()).unwrap().data()[0];
        prop_assert!((got - x * phi(x)).abs() < 1e-9);
    }
}

#[test]
fn f32_matmul_tracks_f64_reference() {
    let (m, k, n) = (17, 33, 9);
    let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    let b: Vec<f64> = (0..k * n).map(|i| ((i * 53) % 97) as f64 / 48.0 - 1.0).collect();
    let c = matmul(
        &Tensor::new(vec![m, k], a.iter().map(|&x| x as f32).collect()).unwrap(),
        &Tensor::new(vec![k, n], b.iter().map(|&x| x as f32).collect()).unwrap(),
    )
    .unwrap();
    let want = triple_loop(&a, &b, m, k, n);
    for (x, y) in c.data().iter().zip(&want) {
        assert!((*x as f64 - y).abs() < 1e-4);
    }
}
