//! Attention checked against a naive per-head reference written from the
//! textbook definition, and block-sparse attention checked against dense
//! attention under the equivalent mask.

use proptest::prelude::*;
use taperkit::attention::{dense_attention_forward, AttentionShape};
use taperkit::encoder::{attention_full, attention_sparse, forward_with_mode, select_mode, AttentionMode, EncoderInput};
use taperkit::sparse::{block_sparse_attention, build_layout};
use taperkit::store::{init_random, names, ModelConfig, ParamStore, SparseConfig};
use taperkit::tensor::{Rng, Tensor};
use taperkit::Error;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

/// softmax(QKᵀ/√d + mask)V per head, with masked keys excluded outright.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], l: usize, hidden: usize, heads: usize, allowed: &[bool]) -> Vec<f64> {
    let d = hidden / heads;
    let mut out = vec![0.0; l * hidden];
    for h in 0..heads {
        for i in 0..l {
            let mut scores = vec![f64::NEG_INFINITY; l];
            for j in 0..l {
                if allowed[i * l + j] {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q[i * hidden + h * d + c] * k[j * hidden + h * d + c];
                    }
                    scores[j] = s / (d as f64).sqrt();
                }
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..l {
                for c in 0..d {
                    out[i * hidden + h * d + c] += e[j] / z * v[j * hidden + h * d + c];
                }
            }
        }
    }
    out
}

fn naive_linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, rows: usize) -> Vec<f64> {
    let (inp, outp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * outp];
    for r in 0..rows {
        for o in 0..outp {
            let mut s = b.data()[o];
            for i in 0..inp {
                s += x[r * inp + i] * w.data()[i * outp + o];
            }
            y[r * outp + o] = s;
        }
    }
    y
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 4,
        ffn_dim: 32,
        l_src: 16,
        l_tgt: 64,
        ..ModelConfig::desk_target()
    }
    .with_sparse(SparseConfig {
        block_size: 4,
        num_global_blocks: 1,
        window_blocks: 3,
        num_random_blocks: 1,
        random_seed: 3,
    })
}

trait WithSparse {
    fn with_sparse(self, sp: SparseConfig) -> Self;
}

impl WithSparse for ModelConfig {
    fn with_sparse(mut self, sp: SparseConfig) -> Self {
        self.sparse = Some(sp);
        self
    }
}

/// Parameters scaled up from init so attention is far from uniform.
fn sharp_params(config: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let base = init_random(config, seed).unwrap().cast::<f64>();
    let mut out = ParamStore::new();
    for (name, t) in base.iter() {
        let t = if name.ends_with(".weight") { t.map(|x| x * 25.0) } else { t.clone() };
        out.insert(name.clone(), t);
    }
    out
}

#[test]
fn attention_full_matches_per_head_oracle() {
    let config = small_config();
    let params = sharp_params(&config, 1);
    let (l, h) = (11, config.hidden_dim);
    let x = random(&[l, h], 2, 1.0);
    let valid: Vec<bool> = (0..l).map(|j| j != 3 && j != 9).collect();
    for layer in 0..config.num_layers {
        let get = |s: &str| params.get(&names::layer(layer, s)).unwrap();
        let q = naive_linear(x.data(), get("q.weight"), get("q.bias"), l);
        let k = naive_linear(x.data(), get("k.weight"), get("k.bias"), l);
        let v = naive_linear(x.data(), get("v.weight"), get("v.bias"), l);
        let allowed: Vec<bool> = (0..l * l).map(|ij| valid[ij % l]).collect();
        let ctx = naive_attention(&q, &k, &v, l, h, config.num_heads, &allowed);
        let expected = naive_linear(&ctx, get("o.weight"), get("o.bias"), l);

        let got = attention_full(&x, &valid, &params, &config, layer).unwrap();
        let diff = got.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "layer {layer}: {diff:e}");

        let got32 = attention_full(&x.cast::<f32>(), &valid, &params.cast::<f32>(), &config, layer).unwrap();
        let diff32 = got32.data().iter().zip(&expected).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(diff32 < 1e-4, "layer {layer} f32: {diff32:e}");
    }
}

#[test]
fn attention_is_not_uniform_or_diagonal() {
    // With sharp weights the output must depend on other positions' values.
    let config = small_config();
    let params = sharp_params(&config, 4);
    let x = random(&[6, 16], 5, 1.0);
    let base = attention_full(&x, &[true; 6], &params, &config, 0).unwrap();
    let mut x2 = x.data().to_vec();
    for v in &mut x2[5 * 16..] {
        *v += 1.0;
    }
    let moved = attention_full(&Tensor::new(vec![6, 16], x2).unwrap(), &[true; 6], &params, &config, 0).unwrap();
    assert!(base.row(0).iter().zip(moved.row(0)).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn dense_kernel_matches_oracle_with_mask() {
    let (l, h, heads) = (9, 12, 3);
    let (q, k, v) = (random(&[l, h], 7, 1.5), random(&[l, h], 8, 1.5), random(&[l, h], 9, 1.0));
    let allowed: Vec<bool> = (0..l * l).map(|ij| (ij * 7) % 5 != 0 || ij % l == ij / l).collect();
    let (out, probs) = dense_attention_forward(q.data(), k.data(), v.data(), AttentionShape::new(l, h, heads).unwrap(), &allowed);
    let expected = naive_attention(q.data(), k.data(), v.data(), l, h, heads, &allowed);
    for (a, b) in out.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    for row in probs.chunks(l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn sparse_cfg(bs: usize, g: usize, w: usize, nr: usize, seed: u64) -> SparseConfig {
    SparseConfig {
        block_size: bs,
        num_global_blocks: g,
        window_blocks: w,
        num_random_blocks: nr,
        random_seed: seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(240))]

    #[test]
    fn block_sparse_equals_dense_under_equivalent_mask(
        bs in prop::sample::select(vec![1usize, 2, 4, 8]),
        nb in 1usize..9,
        g in 0usize..3,
        w in prop::sample::select(vec![1usize, 3, 5]),
        nr in 0usize..3,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        seed in any::<u64>(),
        invalid_every in 0usize..5,
    ) {
        let l = bs * nb;
        prop_assume!(l <= 64);
        let h = heads * 4;
        let layout = build_layout(l, &sparse_cfg(bs, g, w, nr, seed), seed).unwrap();
        let valid: Vec<bool> = (0..l).map(|j| invalid_every == 0 || j % (invalid_every + 1) != 1).collect();
        let q = random(&[l, h], seed, 1.0).cast::<f32>();
        let k = random(&[l, h], seed ^ 1, 1.0).cast::<f32>();
        let v = random(&[l, h], seed ^ 2, 1.0).cast::<f32>();
        let sparse = block_sparse_attention(&q, &k, &v, heads, &layout, &valid).unwrap();

        let mask = layout.dense_mask();
        let allowed: Vec<bool> = (0..l * l).map(|ij| mask[ij] && valid[ij % l]).collect();
        // A row with no allowed key has no defined attention; such rows are skipped.
        let (dense, _) = dense_attention_forward(q.data(), k.data(), v.data(), AttentionShape::new(l, h, heads).unwrap(), &allowed);
        let oracle = naive_attention(&q.cast::<f64>().into_data(), &k.cast::<f64>().into_data(), &v.cast::<f64>().into_data(), l, h, heads, &allowed);
        for i in 0..l {
            let any = (0..l).any(|j| allowed[i * l + j]);
            if !any {
                continue;
            }
            for c in 0..h {
                let s = sparse.data()[i * h + c];
                prop_assert!((s - dense[i * h + c]).abs() <= 1e-5);
                prop_assert!((s as f64 - oracle[i * h + c]).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn full_coverage_layout_equals_attention_full() {
    let config = small_config();
    let params = sharp_params(&config, 11);
    for l in [4usize, 8, 16] {
        let layout = build_layout(l, &sparse_cfg(4, l / 4, 1, 0, 0), 0).unwrap();
        assert!(layout.dense_mask().iter().all(|&m| m));
        let x = random(&[2, l, 16], l as u64, 1.0);
        let valid = vec![true; 2 * l];
        let a = attention_full(&x, &valid, &params, &config, 1).unwrap();
        let b = attention_sparse(&x, &valid, &params, &config, 1, &layout).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}

#[test]
fn mode_dispatch_by_length() {
    let config = small_config();
    assert_eq!(select_mode(&config, 1).unwrap(), AttentionMode::Full);
    assert_eq!(select_mode(&config, 16).unwrap(), AttentionMode::Full);
    assert_eq!(select_mode(&config, 17).unwrap(), AttentionMode::Sparse);
    assert_eq!(select_mode(&config, 64).unwrap(), AttentionMode::Sparse);
    assert!(matches!(select_mode(&config, 65), Err(Error::SequenceTooLong { len: 65, limit: 64 })));

    let params = init_random(&config, 0).unwrap();
    let tokens: Vec<u32> = (0..30).map(|i| 3 + i % 30).collect();
    let input = EncoderInput::single(&tokens).unwrap();
    let (logits, mode) = forward_with_mode(&input, &params, &config, &Rng::new(0), false).unwrap();
    assert_eq!(mode, AttentionMode::Sparse);
    assert_eq!(logits.shape(), &[1, 30, 40]);
    let too_long = EncoderInput::single(&vec![3; 65]).unwrap();
    assert!(forward_with_mode(&too_long, &params, &config, &Rng::new(0), false).is_err());

    let mut source = config.clone();
    source.sparse = None;
    let params = init_random(&source, 0).unwrap();
    assert!(forward_with_mode(&EncoderInput::single(&vec![3; 17]).unwrap(), &params, &source, &Rng::new(0), false).is_err());
}

#[test]
fn sparse_padding_does_not_leak_into_real_rows() {
    // A length that is not a block multiple is padded with invalid keys; the
    // real rows must equal a run where those keys are explicitly masked.
    let config = small_config();
    let params = init_random(&config, 6).unwrap();
    let tokens: Vec<u32> = (0..22).map(|i| 3 + (i * 7) % 37).collect();
    let (logits, _) = forward_with_mode(&EncoderInput::single(&tokens).unwrap(), &params, &config, &Rng::new(0), false).unwrap();

    let mut padded = tokens.clone();
    padded.extend([config.pad_token_id; 2]);
    let valid: Vec<bool> = (0..24).map(|i| i < 22).collect();
    let input = EncoderInput::single(&padded).unwrap().with_valid(valid).unwrap();
    let (full, _) = forward_with_mode(&input, &params, &config, &Rng::new(0), false).unwrap();
    let v = config.vocab_size;
    for (a, b) in logits.data().iter().zip(&full.data()[..22 * v]) {
        assert_eq!(a, b);
    }
}
