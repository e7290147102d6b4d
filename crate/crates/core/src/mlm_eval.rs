//! Masked-token perplexity: corpus packing, masking, scoring and the
//! length × variant sweep.

use serde::Serialize;

use crate::encoder::{encoder_graph, mlm_head_graph, ParamVars, Example, Model};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::store::ModelConfig;
use crate::transform::{variant_model, TargetOverrides, Variant};
use crate::tensor::{Graph, Rng, Scalar};

pub const MASK_RATIO: f64 = 0.15;

/// Concatenates documents in order, each followed by `sep_id`, and cuts the
/// stream into `seq_len` windows. The incomplete tail is dropped.
pub fn pack_corpus(docs: &[Vec<u32>], seq_len: usize, sep_id: u32) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(invalid(format!("seq_len must be at least 2, got {seq_len}")));
    }
    if docs.iter().all(Vec::is_empty) {
        return Err(invalid("empty corpus"));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        stream.extend_from_slice(d);
        stream.push(sep_id);
    }
    Ok(stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect())
}

/// `round(ratio · seq_len)`, at least 1.
pub fn mask_count(seq_len: usize, ratio: f64) -> usize {
    ((ratio * seq_len as f64).round() as usize).max(1)
}

/// Masked inputs with their original tokens at the masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub seq_len: usize,
    /// Inputs with masked positions replaced by the mask id.
    pub token_ids: Vec<Vec<u32>>,
    pub mask_positions: Vec<Vec<bool>>,
    /// Original ids at the masked positions, in position order.
    pub labels: Vec<Vec<u32>>,
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn positions(&self, b: usize) -> Vec<usize> {
        self.mask_positions[b]
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn masked_tokens(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// Replaces `round(ratio · seq)` (at least 1) uniformly chosen non-separator
/// positions of every sequence with `mask_id`.
pub fn mask_tokens(sequences: &[Vec<u32>], ratio: f64, mask_id: u32, sep_id: u32, rng: &mut Rng) -> Result<PackedBatch> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let seq_len = sequences.first().map_or(0, Vec::len);
    if sequences.iter().any(|s| s.len() != seq_len) {
        return Err(invalid("sequences of different lengths"));
    }
    let mut batch = PackedBatch {
        seq_len,
        token_ids: Vec::with_capacity(sequences.len()),
        mask_positions: Vec::with_capacity(sequences.len()),
        labels: Vec::with_capacity(sequences.len()),
    };
    for seq in sequences {
        let candidates: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] != sep_id).collect();
        if candidates.is_empty() {
            return Err(invalid("sequence has no maskable position"));
        }
        let k = mask_count(seq.len(), ratio).min(candidates.len());
        let mut chosen: Vec<usize> = rng.sample_distinct(candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
        chosen.sort_unstable();
        let mut tokens = seq.clone();
        let mut mask = vec![false; seq.len()];
        let mut labels = Vec::with_capacity(k);
        for &p in &chosen {
            labels.push(seq[p]);
            tokens[p] = mask_id;
            mask[p] = true;
        }
        batch.token_ids.push(tokens);
        batch.mask_positions.push(mask);
        batch.labels.push(labels);
    }
    Ok(batch)
}

/// Anything that can produce logits at selected positions of a sequence.
pub trait MaskedLm: Sync {
    fn vocab_size(&self) -> usize;

    /// One row of `vocab_size` logits per entry of `positions`.
    fn masked_logits(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> MaskedLm for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn masked_logits(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = tokens.len();
        let (segments, valid) = (vec![0; n], vec![true; n]);
        let ex = Example {
            tokens,
            segments: &segments,
            valid: &valid,
        };
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, &self.params, false);
        let enc = encoder_graph(&mut g, &p, &self.config, ex, &mut Rng::new(0), false)?;
        let picked = g.gather_rows(enc.hidden, positions)?;
        let logits = mlm_head_graph(&mut g, &p, &self.config, picked)?;
        let v = g.value(logits);
        Ok((0..positions.len()).map(|i| v.row(i).iter().map(|x| x.as_f64()).collect()).collect())
    }
}

/// Masked-token count, summed NLL and perplexity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PplStats {
    pub masked_tokens: usize,
    pub total_nll: f64,
    pub mean_nll: f64,
    pub ppl: f64,
}

fn nll(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// exp(mean NLL) over every masked position of `batch`, inference mode.
/// Sequences are scored in parallel and their sums reduced in index order.
pub fn masked_ppl<M: MaskedLm + ?Sized>(model: &M, batch: &PackedBatch) -> Result<PplStats> {
    let v = model.vocab_size();
    let sums = exec::map_indexed(batch.len(), |b| -> Result<f64> {
        let positions = batch.positions(b);
        let logits = model.masked_logits(&batch.token_ids[b], &positions)?;
        let mut s = 0.0f64;
        for (row, &label) in logits.iter().zip(&batch.labels[b]) {
            if label as usize >= v || row.len() != v {
                return Err(invalid(format!("label {label} or logit width {} does not fit vocab {v}", row.len())));
            }
            s += nll(row, label as usize);
        }
        Ok(s)
    });
    let mut total = 0.0f64;
    for s in sums {
        total += s?;
    }
    let masked_tokens = batch.masked_tokens();
    if masked_tokens == 0 {
        return Err(invalid("no masked tokens to score"));
    }
    let mean_nll = total / masked_tokens as f64;
    let ppl = mean_nll.exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite { op: "masked_ppl" });
    }
    Ok(PplStats {
        masked_tokens,
        total_nll: total,
        mean_nll,
        ppl,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PplRow {
    pub variant: String,
    pub tau: Option<f64>,
    pub seq_len: usize,
    pub masked_tokens: usize,
    pub mean_nll: f64,
    pub ppl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PplReport {
    pub rows: Vec<PplRow>,
}

pub const PPL_CSV_HEADER: &str = "variant,tau,seq_len,masked_tokens,mean_nll,ppl";

/// `%g`-style rendering with 6 significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-4..6).contains(&exp) {
        format!("{}e{}{:02}", trim(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim(format!("{x:.*}", (5 - exp) as usize))
    }
}

impl PplReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{PPL_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                r.tau.map(fmt_sig6).unwrap_or_default(),
                r.seq_len,
                r.masked_tokens,
                fmt_sig6(r.mean_nll),
                fmt_sig6(r.ppl)
            ));
        }
        out
    }

    pub fn find(&self, variant: &str, tau: Option<f64>, seq_len: usize) -> Option<&PplRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.tau == tau && r.seq_len == seq_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    /// Seeds masking; every variant sees identical batches at a given length.
    pub seed: u64,
    pub ratio: f64,
    /// Evaluate at most this many packed sequences per length.
    pub max_sequences: Option<usize>,
    pub overrides: TargetOverrides,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            ratio: MASK_RATIO,
            max_sequences: None,
            overrides: TargetOverrides::default(),
        }
    }
}

/// Packs and masks `docs` at `seq_len` with the sweep's seed discipline.
pub fn eval_batch(docs: &[Vec<u32>], config: &ModelConfig, seq_len: usize, opts: &SweepOptions) -> Result<PackedBatch> {
    let mut seqs = pack_corpus(docs, seq_len, config.sep_token_id)?;
    if let Some(n) = opts.max_sequences {
        seqs.truncate(n);
    }
    if seqs.is_empty() {
        return Err(invalid(format!("corpus too small for one sequence of {seq_len} tokens")));
    }
    let mut rng = Rng::new(opts.seed).fork(seq_len as u64);
    mask_tokens(&seqs, opts.ratio, config.mask_token_id, config.sep_token_id, &mut rng)
}

/// Perplexity of every variant built from `src` at every length.
/// Rows are ordered variant-major, lengths in the given order.
pub fn ppl_length_sweep(
    src: &Model<f32>,
    docs: &[Vec<u32>],
    lengths: &[usize],
    variants: &[Variant],
    opts: &SweepOptions,
) -> Result<PplReport> {
    let models = variants
        .iter()
        .map(|&v| variant_model(src, v, &opts.overrides).map(|(m, _)| (v, m)))
        .collect::<Result<Vec<_>>>()?;
    let limit = models.first().map_or(src.config.l_tgt, |(_, m)| m.config.max_len());
    if let Some(&len) = lengths.iter().find(|&&l| l > limit) {
        return Err(Error::SequenceTooLong { len, limit });
    }
    let batches = lengths
        .iter()
        .map(|&len| eval_batch(docs, &src.config, len, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut report = PplReport::default();
    for (variant, model) in &models {
        for (&len, batch) in lengths.iter().zip(&batches) {
            let stats = masked_ppl(model, batch)?;
            report.rows.push(PplRow {
                variant: variant.name().to_string(),
                tau: variant.tau(),
                seq_len: len,
                masked_tokens: stats.masked_tokens,
                mean_nll: stats.mean_nll,
                ppl: stats.ppl,
            });
        }
    }
    Ok(report)
}
