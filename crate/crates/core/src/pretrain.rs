//! Synthetic corpus and a masked-LM training loop that produce a small source
//! model with learned position embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{masked_lm_loss, ParamVars};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::mlm_eval::{mask_tokens, MASK_RATIO};
use crate::store::{init_random, ModelConfig, ParamStore};
use crate::tensor::{Graph, Rng, Tensor};

/// Token id written at every `period`-th position of each document.
pub const SENTINEL_TOKEN: u32 = 3;
/// First id used for ordinary corpus tokens; lower ids are pad, sep, mask, sentinel.
pub const FIRST_REGULAR_TOKEN: u32 = 4;

/// Order-2 Markov text overlaid with a position-periodic pattern.
///
/// Each document repeats a motif of `period` tokens: slot 0 is the sentinel,
/// the other slots continue an order-2 Markov chain. Every non-sentinel
/// position independently deviates from the motif with probability
/// `motif_noise`, in which case the chain draws a fresh token from the two
/// preceding tokens of the document. A masked token is therefore best
/// predicted from the tokens exactly one period away, which only position
/// information can locate.
///
/// In the chain, each regular token `b` has `branching` successors; which one
/// follows the context `(a, b)` is drawn from `successor_weights` rotated by
/// `a`'s class (`a mod branching`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub num_docs: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// Motif length; sentinels sit at document positions `≡ 0 (mod period)`.
    pub period: usize,
    pub motif_noise: f64,
    pub branching: usize,
    pub successor_weights: Vec<f64>,
    /// Fraction of documents held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_docs: 2000,
            min_doc_len: 64,
            max_doc_len: 256,
            period: 8,
            motif_noise: 0.1,
            branching: 4,
            successor_weights: vec![0.55, 0.25, 0.12, 0.08],
            eval_fraction: 0.1,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self, l_src: Option<usize>) -> Result<()> {
        if self.vocab_size <= FIRST_REGULAR_TOKEN as usize + 1 {
            return Err(invalid("vocabulary too small for the reserved ids"));
        }
        if self.num_docs < 2 || self.min_doc_len == 0 || self.max_doc_len < self.min_doc_len {
            return Err(invalid("need at least two documents with 0 < min_doc_len <= max_doc_len"));
        }
        if self.period < 2 {
            return Err(invalid("period must be at least 2"));
        }
        if let Some(l) = l_src {
            if self.period >= l {
                return Err(invalid(format!("period {} must be below l_src {l}", self.period)));
            }
        }
        if !(0.0..=1.0).contains(&self.motif_noise) {
            return Err(invalid("motif_noise must be in [0, 1]"));
        }
        if self.branching == 0 || self.successor_weights.len() != self.branching {
            return Err(invalid("successor_weights must have one entry per branch"));
        }
        if self.successor_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("successor weights must be positive"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(invalid("eval_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

struct Chain<'a> {
    spec: &'a SyntheticCorpusSpec,
    regular: u64,
    salt: u64,
    total: f64,
}

impl Chain<'_> {
    fn random_regular(&self, rng: &mut Rng) -> u32 {
        FIRST_REGULAR_TOKEN + rng.below(self.regular as usize) as u32
    }

    /// Next token after the regular-token context `(a, b)`.
    fn next(&self, a: u32, b: u32, rng: &mut Rng) -> u32 {
        let k = self.spec.branching;
        let shift = a as usize % k;
        let mut u = rng.uniform() * self.total;
        let mut pick = k - 1;
        for j in 0..k {
            let w = self.spec.successor_weights[(j + k - shift) % k];
            if u < w {
                pick = j;
                break;
            }
            u -= w;
        }
        FIRST_REGULAR_TOKEN + (mix(self.salt ^ ((b as u64) << 8) ^ pick as u64) % self.regular) as u32
    }
}

/// Documents of the synthetic corpus, split by document: the last
/// `eval_fraction` of them (rounded, at least one) form the eval split.
pub fn gen_synthetic_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate(None)?;
    let chain = Chain {
        spec,
        regular: spec.vocab_size as u64 - FIRST_REGULAR_TOKEN as u64,
        salt: mix(seed ^ 0x7ab1e),
        total: spec.successor_weights.iter().sum(),
    };
    let mut rng = Rng::new(seed);
    let mut docs = Vec::with_capacity(spec.num_docs);
    for _ in 0..spec.num_docs {
        let len = rng.range_inclusive(spec.min_doc_len, spec.max_doc_len);
        let (mut a, mut b) = (chain.random_regular(&mut rng), chain.random_regular(&mut rng));
        let mut motif = vec![SENTINEL_TOKEN; spec.period];
        for slot in motif.iter_mut().skip(1) {
            *slot = chain.next(a, b, &mut rng);
            (a, b) = (b, *slot);
        }
        let mut doc: Vec<u32> = Vec::with_capacity(len);
        for i in 0..len {
            let slot = i % spec.period;
            let token = if slot != 0 && rng.uniform() < spec.motif_noise {
                let mut regular = doc.iter().rev().filter(|&&t| t != SENTINEL_TOKEN);
                let b = regular.next().copied().unwrap_or(motif[1]);
                let a = regular.next().copied().unwrap_or(b);
                chain.next(a, b, &mut rng)
            } else {
                motif[slot]
            };
            doc.push(token);
        }
        docs.push(doc);
    }
    let n_eval = ((spec.num_docs as f64 * spec.eval_fraction).round() as usize).clamp(1, spec.num_docs - 1);
    let eval = docs.split_off(spec.num_docs - n_eval);
    Ok(Corpus { train: docs, eval })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-4,
            batch_size: 16,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PretrainOptions {
    /// Linear warmup over the first `warmup_fraction` of steps, then constant.
    /// `step` counts from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.steps as f64 * self.warmup_fraction).round() as usize).max(1);
        self.lr * (step.min(warmup) as f64 / warmup as f64)
    }
}

struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut updated = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let p = params.get(name)?;
            let (m, v) = (self.m.get_mut(name).expect("moment"), self.v.get_mut(name).expect("moment"));
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g[i] as f64;
                let mi = Self::B1 * m[i] as f64 + (1.0 - Self::B1) * gi;
                let vi = Self::B2 * v[i] as f64 + (1.0 - Self::B2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
                data[i] = (data[i] as f64 - delta) as f32;
            }
            let t = Tensor::new(p.shape().to_vec(), data)?.check_finite("adam update")?;
            updated.push((name.clone(), t));
        }
        for (name, t) in updated {
            params.insert(name, t);
        }
        Ok(())
    }
}

/// Concatenated training stream: every document followed by a separator.
fn training_stream(docs: &[Vec<u32>], sep: u32) -> Vec<u32> {
    let mut s = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        s.extend_from_slice(d);
        s.push(sep);
    }
    s
}

/// Windows of `len` tokens starting at uniformly random offsets.
fn sample_windows(stream: &[u32], len: usize, count: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
    (0..count)
        .map(|_| {
            let start = rng.below(stream.len() - len + 1);
            stream[start..start + len].to_vec()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    /// Mean masked-token loss per step, step 1 first.
    pub losses: Vec<f64>,
}

/// Summed masked NLL of each example and its gradients, reduced in example order.
pub(crate) fn batch_gradients(
    params: &ParamStore,
    config: &ModelConfig,
    windows: &[Vec<u32>],
    positions: &[Vec<usize>],
    labels: &[Vec<u32>],
    rng: &Rng,
    training: bool,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let per_example = exec::map_indexed(windows.len(), |b| -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, params, true);
        let mut r = rng.fork(b as u64);
        let loss = masked_lm_loss(&mut g, &p, config, &windows[b], &positions[b], &labels[b], &mut r, training)?;
        let value = g.value(loss).data()[0] as f64;
        let mut grads = g.backward(loss)?;
        let named = p
            .iter()
            .map(|(name, &v)| {
                let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(params.get(name).expect("bound").shape()));
                (name.clone(), t)
            })
            .collect();
        Ok((value, named))
    });
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for item in per_example {
        let (loss, grads) = item?;
        total += loss;
        for (name, t) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(t.data()).for_each(|(a, &g)| *a += g),
                None => {
                    sum.insert(name, t.into_data());
                }
            }
        }
    }
    Ok((total, sum))
}

/// Masked-LM pretraining with Adam. `progress` is called after every step
/// with `(step, loss)`.
pub fn pretrain_mlm(
    config: &ModelConfig,
    corpus: &Corpus,
    opts: &PretrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    config.validate()?;
    if config.sparse.is_some() {
        return Err(invalid("pretraining expects a full-attention config"));
    }
    if opts.steps == 0 || opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(invalid("steps, batch_size and lr must be positive"));
    }
    let seq = config.l_src;
    let stream = training_stream(&corpus.train, config.sep_token_id);
    if stream.len() < seq {
        return Err(invalid("training corpus shorter than one sequence"));
    }
    let mut params = init_random(config, opts.seed)?;
    let mut adam = Adam::new(&params);
    let root = Rng::new(opts.seed).fork(0x7a1);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let mut rng = root.fork(step as u64);
        let windows = sample_windows(&stream, seq, opts.batch_size, &mut rng);
        let batch = mask_tokens(&windows, MASK_RATIO, config.mask_token_id, config.sep_token_id, &mut rng)?;
        let positions: Vec<Vec<usize>> = (0..batch.len()).map(|b| batch.positions(b)).collect();
        let count = batch.masked_tokens() as f64;
        let (total, mut grads) =
            batch_gradients(&params, config, &batch.token_ids, &positions, &batch.labels, &rng.fork(1), true)?;
        let loss = total / count;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let scale = (1.0 / count) as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
        adam.step(&mut params, &grads, opts.lr_at(step))?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(PretrainOutcome { params, losses })
}

/// `step,loss` CSV of a loss curve.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_split() {
        let spec = SyntheticCorpusSpec {
            num_docs: 50,
            ..Default::default()
        };
        let a = gen_synthetic_corpus(&spec, 5).unwrap();
        assert_eq!(a, gen_synthetic_corpus(&spec, 5).unwrap());
        assert_ne!(a, gen_synthetic_corpus(&spec, 6).unwrap());
        assert_eq!(a.eval.len(), 5);
        assert_eq!(a.train.len(), 45);
        for doc in a.train.iter().chain(&a.eval) {
            for (i, &t) in doc.iter().enumerate() {
                assert_eq!(t == SENTINEL_TOKEN, i % spec.period == 0);
                assert!((t as usize) < spec.vocab_size);
            }
        }
    }

    #[test]
    fn noiseless_documents_repeat_their_motif() {
        let spec = SyntheticCorpusSpec {
            num_docs: 20,
            motif_noise: 0.0,
            ..Default::default()
        };
        let c = gen_synthetic_corpus(&spec, 9).unwrap();
        for doc in c.train.iter().chain(&c.eval) {
            for i in spec.period..doc.len() {
                assert_eq!(doc[i], doc[i - spec.period]);
            }
        }
    }

    #[test]
    fn deviation_rate_tracks_motif_noise() {
        let spec = SyntheticCorpusSpec {
            num_docs: 400,
            motif_noise: 0.2,
            ..Default::default()
        };
        let c = gen_synthetic_corpus(&spec, 4).unwrap();
        // Count tokens that differ from their slot's majority. A fresh draw
        // continues from the same context as the motif most of the time, so
        // it often reproduces the motif token: the observed rate sits below
        // motif_noise but well above zero.
        let (mut off, mut total) = (0usize, 0usize);
        for doc in &c.train {
            for slot in 1..spec.period {
                let column: Vec<u32> = doc.iter().skip(slot).step_by(spec.period).copied().collect();
                let mut counts = BTreeMap::new();
                for &t in &column {
                    *counts.entry(t).or_insert(0usize) += 1;
                }
                let majority = counts.values().copied().max().unwrap();
                off += column.len() - majority;
                total += column.len();
            }
        }
        let rate = off as f64 / total as f64;
        assert!(rate > 0.08 && rate < 0.2, "{rate}");
    }

    #[test]
    fn warmup_then_constant() {
        let o = PretrainOptions {
            steps: 100,
            lr: 1.0,
            ..Default::default()
        };
        assert_eq!(o.lr_at(1), 0.1);
        assert_eq!(o.lr_at(5), 0.5);
        assert_eq!(o.lr_at(10), 1.0);
        assert_eq!(o.lr_at(100), 1.0);
    }

    #[test]
    fn period_must_fit_in_source_length() {
        let spec = SyntheticCorpusSpec {
            period: 64,
            ..Default::default()
        };
        assert!(spec.validate(Some(64)).is_err());
        assert!(spec.validate(None).is_ok());
    }
}
