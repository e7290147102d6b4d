//! Serial (one worker) against the default rayon pool on the hot paths.
//! Built without the `parallel` feature both arms run on the calling thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use taperkit::encoder::forward;
use taperkit::exec::{current_threads, with_threads};
use taperkit::mlm_eval::{eval_batch, masked_ppl, SweepOptions};
use taperkit::pretrain::{gen_synthetic_corpus, SyntheticCorpusSpec};
use taperkit::sparse::{block_sparse_attention, build_layout};
use taperkit::store::init_random;
use taperkit::transform::{variant_model, TargetOverrides, Variant};
use taperkit::{EncoderInput, Model, ModelConfig, Rng, SparseConfig, Tensor};

const ARMS: [(&str, Option<usize>); 2] = [("serial", Some(1)), ("parallel", None)];

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform() as f32 * 2.0 - 1.0)
}

fn target() -> Model<f32> {
    let config = ModelConfig::default();
    let src = Model::new(config.clone(), init_random(&config, 0).unwrap()).unwrap();
    variant_model(&src, Variant::parse("taper:2.0", 0).unwrap(), &TargetOverrides::default())
        .unwrap()
        .0
}

fn sparse_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_sparse_attention");
    let (hidden, heads) = (64, 4);
    for len in [256, 1024] {
        let layout = build_layout(len, &SparseConfig::default(), 0).unwrap();
        let (q, k, v) = (noise(&[len, hidden], 1), noise(&[len, hidden], 2), noise(&[len, hidden], 3));
        let valid = vec![true; len];
        for (arm, threads) in ARMS {
            group.bench_with_input(BenchmarkId::new(arm, len), &len, |b, _| {
                with_threads(threads, || b.iter(|| black_box(block_sparse_attention(&q, &k, &v, heads, &layout, &valid).unwrap())))
            });
        }
    }
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let model = target();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let mut rng = Rng::new(7);
    let vocab = model.config.vocab_size;
    for len in [64, 256] {
        let rows: Vec<Vec<u32>> = (0..8).map(|_| (0..len).map(|_| (3 + rng.below(vocab - 3)) as u32).collect()).collect();
        let input = EncoderInput::from_rows(&rows).unwrap();
        for (arm, threads) in ARMS {
            group.bench_with_input(BenchmarkId::new(arm, len), &len, |b, _| {
                with_threads(threads, || {
                    b.iter(|| black_box(forward(&input, &model.params, &model.config, &Rng::new(0), false).unwrap()))
                })
            });
        }
    }
    group.finish();
}

fn masked_perplexity(c: &mut Criterion) {
    let model = target();
    let corpus = gen_synthetic_corpus(&SyntheticCorpusSpec::default(), 0).unwrap();
    let opts = SweepOptions { max_sequences: Some(8), ..SweepOptions::default() };
    let batch = eval_batch(&corpus.eval, &model.config, 256, &opts).unwrap();
    let mut group = c.benchmark_group("masked_ppl");
    group.sample_size(10);
    for (arm, threads) in ARMS {
        group.bench_function(arm, |b| with_threads(threads, || b.iter(|| black_box(masked_ppl(&model, &batch).unwrap()))));
    }
    group.finish();
    eprintln!("default pool: {} worker(s)", current_threads());
}

criterion_group!(benches, sparse_attention, encoder_forward, masked_perplexity);
criterion_main!(benches);
