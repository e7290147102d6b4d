//! Post-LN transformer encoder with a tied masked-LM head.
//!
//! One parameterization covers both model families: the position-id offset,
//! the number of segment types and the embedding LN/dropout order all come
//! from [`ModelConfig`]. Inputs up to `l_src` tokens use full attention; longer
//! inputs (up to `l_tgt`, when a sparse config is present) use the
//! block-sparse layout shared by every layer.
//!
//! Every batch item is evaluated on its own gradient tape, so batch items are
//! independent and can run in parallel.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::exec;
use crate::sparse::{build_layout, SparseLayout};
use crate::store::{load_checkpoint, names, save_checkpoint, LnOrder, ModelConfig, ParamStore};
use crate::tensor::{Graph, Rng, Scalar, Tensor, Var};

/// A batch of token sequences, all of length `seq`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    batch: usize,
    seq: usize,
    token_ids: Vec<u32>,
    segment_ids: Vec<u32>,
    valid: Vec<bool>,
}

impl EncoderInput {
    pub fn new(batch: usize, seq: usize, token_ids: Vec<u32>, segment_ids: Vec<u32>, valid: Vec<bool>) -> Result<Self> {
        let n = batch * seq;
        if n == 0 || token_ids.len() != n || segment_ids.len() != n || valid.len() != n {
            return Err(shape_err(format!(
                "encoder input [{batch}, {seq}] with {} tokens, {} segments, {} mask entries",
                token_ids.len(),
                segment_ids.len(),
                valid.len()
            )));
        }
        Ok(Self {
            batch,
            seq,
            token_ids,
            segment_ids,
            valid,
        })
    }

    /// Equal-length rows, segment 0 everywhere, every position valid.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(shape_err("rows of different lengths"));
        }
        let n = rows.len() * seq;
        Self::new(rows.len(), seq, rows.concat(), vec![0; n], vec![true; n])
    }

    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::from_rows(&[tokens.to_vec()])
    }

    pub fn with_segments(mut self, segment_ids: Vec<u32>) -> Result<Self> {
        if segment_ids.len() != self.token_ids.len() {
            return Err(shape_err("segment ids do not match tokens"));
        }
        self.segment_ids = segment_ids;
        Ok(self)
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.token_ids.len() {
            return Err(shape_err("validity mask does not match tokens"));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn tokens(&self, b: usize) -> &[u32] {
        &self.token_ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn segments(&self, b: usize) -> &[u32] {
        &self.segment_ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn valid(&self, b: usize) -> &[bool] {
        &self.valid[b * self.seq..(b + 1) * self.seq]
    }

    fn example(&self, b: usize) -> Example<'_> {
        Example {
            tokens: self.tokens(b),
            segments: self.segments(b),
            valid: self.valid(b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Example<'a> {
    pub tokens: &'a [u32],
    pub segments: &'a [u32],
    pub valid: &'a [bool],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    Sparse,
}

/// Mode used for an input of `seq` tokens.
pub fn select_mode(config: &ModelConfig, seq: usize) -> Result<AttentionMode> {
    if seq == 0 {
        return Err(invalid("empty sequence"));
    }
    if seq <= config.l_src {
        Ok(AttentionMode::Full)
    } else if config.sparse.is_some() && seq <= config.l_tgt {
        Ok(AttentionMode::Sparse)
    } else {
        Err(Error::SequenceTooLong {
            len: seq,
            limit: config.max_len(),
        })
    }
}

/// Parameters bound as leaves on one tape, looked up by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Adds one leaf per parameter.
    pub fn new<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, requires_grad: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone().with_requires_grad(requires_grad))))
            .collect();
        Self { vars }
    }

    /// Uses leaves the caller already added.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn layer(&self, i: usize, suffix: &str) -> Result<Var> {
        self.var(&names::layer(i, suffix))
    }
}

enum AttentionPlan {
    Full { allowed: Vec<bool> },
    Sparse { layout: Arc<SparseLayout>, valid: Vec<bool> },
}

impl AttentionPlan {
    fn full(valid: &[bool]) -> Self {
        let l = valid.len();
        let allowed: Vec<bool> = (0..l * l).map(|ij| valid[ij % l]).collect();
        AttentionPlan::Full { allowed }
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Word + position + segment embeddings, then LN and dropout in config order.
pub(crate) fn embed_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    ex: Example<'_>,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let seq = ex.tokens.len();
    let pos_rows = g.value(p.var(names::POS_EMB)?).shape()[0];
    if config.position_offset + seq > pos_rows {
        return Err(Error::SequenceTooLong {
            len: seq,
            limit: pos_rows.saturating_sub(config.position_offset),
        });
    }
    if let Some(&bad) = ex.segments.iter().find(|&&s| s as usize >= config.num_segment_types) {
        return Err(invalid(format!(
            "segment id {bad} out of range for {} segment types",
            config.num_segment_types
        )));
    }
    let tok_idx: Vec<usize> = ex.tokens.iter().map(|&t| t as usize).collect();
    let pos_idx: Vec<usize> = (0..seq).map(|t| config.position_offset + t).collect();
    let seg_idx: Vec<usize> = ex.segments.iter().map(|&s| s as usize).collect();

    let words = g.gather_rows(p.var(names::WORD_EMB)?, &tok_idx)?;
    let positions = g.gather_rows(p.var(names::POS_EMB)?, &pos_idx)?;
    let segments = g.gather_rows(p.var(names::SEG_EMB)?, &seg_idx)?;
    let sum = g.add(words, positions)?;
    let sum = g.add(sum, segments)?;

    let (gamma, beta) = (p.var(names::EMB_LN_GAMMA)?, p.var(names::EMB_LN_BETA)?);
    let eps = config.layer_norm_eps;
    match config.ln_order {
        LnOrder::LnThenDropoutInEmbeddings => {
            let x = g.layer_norm(sum, gamma, beta, eps)?;
            g.dropout(x, config.dropout_prob, rng, training)
        }
        LnOrder::DropoutThenLnEverywhere => {
            let x = g.dropout(sum, config.dropout_prob, rng, training)?;
            g.layer_norm(x, gamma, beta, eps)
        }
    }
}

/// Q/K/V projections, multi-head attention and the output projection.
fn self_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    x: Var,
    plan: &AttentionPlan,
) -> Result<Var> {
    let q = linear(g, x, p.layer(layer, "q.weight")?, p.layer(layer, "q.bias")?)?;
    let k = linear(g, x, p.layer(layer, "k.weight")?, p.layer(layer, "k.bias")?)?;
    let v = linear(g, x, p.layer(layer, "v.weight")?, p.layer(layer, "v.bias")?)?;
    let ctx = match plan {
        AttentionPlan::Full { allowed } => g.attention(q, k, v, config.num_heads, allowed)?,
        AttentionPlan::Sparse { layout, valid } => {
            g.sparse_attention(q, k, v, config.num_heads, layout.clone(), valid)?
        }
    };
    linear(g, ctx, p.layer(layer, "o.weight")?, p.layer(layer, "o.bias")?)
}

fn layer_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    x: Var,
    plan: &AttentionPlan,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let (pd, eps) = (config.dropout_prob, config.layer_norm_eps);
    let a = self_attention_graph(g, p, config, layer, x, plan)?;
    let a = g.dropout(a, pd, rng, training)?;
    let x = g.add(x, a)?;
    let x = g.layer_norm(x, p.layer(layer, "attn_ln.gamma")?, p.layer(layer, "attn_ln.beta")?, eps)?;

    let f = linear(g, x, p.layer(layer, "ffn_in.weight")?, p.layer(layer, "ffn_in.bias")?)?;
    let f = g.gelu(f)?;
    let f = linear(g, f, p.layer(layer, "ffn_out.weight")?, p.layer(layer, "ffn_out.bias")?)?;
    let f = g.dropout(f, pd, rng, training)?;
    let x = g.add(x, f)?;
    g.layer_norm(x, p.layer(layer, "ffn_ln.gamma")?, p.layer(layer, "ffn_ln.beta")?, eps)
}

/// Output of the encoder stack for one example and its number of real
/// (unpadded) rows.
pub(crate) struct Encoded {
    pub hidden: Var,
    pub seq: usize,
}

/// Full encoder stack for one example. Sparse-mode inputs are padded with
/// invalid pad tokens up to a block multiple; the padded rows stay in `hidden`.
pub(crate) fn encoder_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    ex: Example<'_>,
    rng: &mut Rng,
    training: bool,
) -> Result<Encoded> {
    let seq = ex.tokens.len();
    let mode = select_mode(config, seq)?;
    let (tokens, segments, valid);
    let ex = match (mode, &config.sparse) {
        (AttentionMode::Sparse, Some(sp)) if seq % sp.block_size != 0 => {
            let padded = seq.div_ceil(sp.block_size) * sp.block_size;
            tokens = [ex.tokens, &vec![config.pad_token_id; padded - seq]].concat();
            segments = [ex.segments, &vec![0; padded - seq]].concat();
            valid = [ex.valid, &vec![false; padded - seq]].concat();
            Example {
                tokens: &tokens,
                segments: &segments,
                valid: &valid,
            }
        }
        _ => ex,
    };
    let plan = match (mode, &config.sparse) {
        (AttentionMode::Sparse, Some(sp)) => AttentionPlan::Sparse {
            layout: Arc::new(build_layout(ex.tokens.len(), sp, sp.random_seed)?),
            valid: ex.valid.to_vec(),
        },
        _ => AttentionPlan::full(ex.valid),
    };
    let mut x = embed_graph(g, p, config, ex, rng, training)?;
    for layer in 0..config.num_layers {
        x = layer_graph(g, p, config, layer, x, &plan, rng, training)?;
    }
    Ok(Encoded { hidden: x, seq })
}

/// Dense + GELU + LN, then projection onto the (tied) word-embedding matrix plus bias.
pub(crate) fn mlm_head_graph<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, config: &ModelConfig, hidden: Var) -> Result<Var> {
    let h = linear(g, hidden, p.var(names::MLM_DENSE_W)?, p.var(names::MLM_DENSE_B)?)?;
    let h = g.gelu(h)?;
    let h = g.layer_norm(h, p.var(names::MLM_LN_GAMMA)?, p.var(names::MLM_LN_BETA)?, config.layer_norm_eps)?;
    let logits = g.matmul_nt(h, p.var(names::WORD_EMB)?)?;
    g.add_row(logits, p.var(names::MLM_BIAS)?)
}

/// Summed masked-LM negative log-likelihood of one segment-0 sequence, with
/// the head evaluated only at `positions`.
pub fn masked_lm_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &ModelConfig,
    tokens: &[u32],
    positions: &[usize],
    labels: &[u32],
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    if positions.len() != labels.len() {
        return Err(shape_err("one label per masked position required"));
    }
    let n = tokens.len();
    let (segments, valid) = (vec![0; n], vec![true; n]);
    let ex = Example {
        tokens,
        segments: &segments,
        valid: &valid,
    };
    let enc = encoder_graph(g, p, config, ex, rng, training)?;
    let picked = g.gather_rows(enc.hidden, positions)?;
    let logits = mlm_head_graph(g, p, config, picked)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    g.cross_entropy_sum(logits, &labels)
}

fn stack<T: Scalar>(parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let inner = parts[0].shape().to_vec();
    let mut shape = vec![parts.len()];
    shape.extend(inner);
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

fn per_example<T, F>(input: &EncoderInput, rng: &Rng, f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(Example<'_>, &mut Rng) -> Result<Tensor<T>> + Sync + Send,
{
    let parts = exec::map_indexed(input.batch(), |b| {
        let mut r = rng.fork(b as u64);
        f(input.example(b), &mut r)
    });
    stack(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Embedding block output, `[batch, seq, hidden]`.
pub fn embed<T: Scalar>(
    input: &EncoderInput,
    params: &ParamStore<T>,
    config: &ModelConfig,
    rng: &Rng,
    training: bool,
) -> Result<Tensor<T>> {
    per_example(input, rng, |ex, r| {
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, params, false);
        let x = embed_graph(&mut g, &p, config, ex, r, training)?;
        Ok(g.value(x).clone())
    })
}

fn attention_with_plan<T: Scalar>(
    hidden: &Tensor<T>,
    valid: &[bool],
    params: &ParamStore<T>,
    config: &ModelConfig,
    layer: usize,
    layout: Option<&SparseLayout>,
) -> Result<Tensor<T>> {
    let (batch, seq, h) = match hidden.shape() {
        [b, s, h] => (*b, *s, *h),
        [s, h] => (1, *s, *h),
        s => return Err(shape_err(format!("expected [batch, seq, hidden], got {s:?}"))),
    };
    if valid.len() != batch * seq {
        return Err(shape_err("validity mask does not match hidden states"));
    }
    if layer >= config.num_layers {
        return Err(invalid(format!("layer {layer} out of range")));
    }
    let layout = layout.map(|l| Arc::new(l.clone()));
    let parts = exec::map_indexed(batch, |b| {
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, params, false);
        let x = g.leaf(Tensor::new(vec![seq, h], hidden.data()[b * seq * h..(b + 1) * seq * h].to_vec())?);
        let v = &valid[b * seq..(b + 1) * seq];
        let plan = match &layout {
            Some(l) => AttentionPlan::Sparse {
                layout: l.clone(),
                valid: v.to_vec(),
            },
            None => AttentionPlan::full(v),
        };
        let out = self_attention_graph(&mut g, &p, config, layer, x, &plan)?;
        Ok(g.value(out).clone())
    });
    let out = stack(parts.into_iter().collect::<Result<Vec<_>>>()?)?;
    out.reshape(hidden.shape())
}

/// Multi-head self-attention of layer `layer` (projections included) with full
/// attention over valid keys. `hidden` is `[batch, seq, hidden]` or `[seq, hidden]`;
/// `valid` has one entry per token.
pub fn attention_full<T: Scalar>(
    hidden: &Tensor<T>,
    valid: &[bool],
    params: &ParamStore<T>,
    config: &ModelConfig,
    layer: usize,
) -> Result<Tensor<T>> {
    attention_with_plan(hidden, valid, params, config, layer, None)
}

/// Like [`attention_full`] but restricted to a block-sparse layout.
pub fn attention_sparse<T: Scalar>(
    hidden: &Tensor<T>,
    valid: &[bool],
    params: &ParamStore<T>,
    config: &ModelConfig,
    layer: usize,
    layout: &SparseLayout,
) -> Result<Tensor<T>> {
    attention_with_plan(hidden, valid, params, config, layer, Some(layout))
}

/// Encoder stack output, `[batch, seq, hidden]`.
pub fn encoder_forward<T: Scalar>(
    input: &EncoderInput,
    params: &ParamStore<T>,
    config: &ModelConfig,
    rng: &Rng,
    training: bool,
) -> Result<Tensor<T>> {
    per_example(input, rng, |ex, r| {
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, params, false);
        let enc = encoder_graph(&mut g, &p, config, ex, r, training)?;
        g.value(enc.hidden).slice_rows(0, enc.seq)
    })
}

/// Masked-LM logits from encoder output: `[batch, seq, vocab]`.
pub fn mlm_logits<T: Scalar>(hidden: &Tensor<T>, params: &ParamStore<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    let (batch, seq, h) = match hidden.shape() {
        [b, s, h] => (*b, *s, *h),
        s => return Err(shape_err(format!("expected [batch, seq, hidden], got {s:?}"))),
    };
    let parts = exec::map_indexed(batch, |b| {
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, params, false);
        let x = g.leaf(Tensor::new(vec![seq, h], hidden.data()[b * seq * h..(b + 1) * seq * h].to_vec())?);
        let logits = mlm_head_graph(&mut g, &p, config, x)?;
        Ok(g.value(logits).clone())
    });
    stack(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Logits `[batch, seq, vocab]` and the attention mode that produced them.
pub fn forward_with_mode<T: Scalar>(
    input: &EncoderInput,
    params: &ParamStore<T>,
    config: &ModelConfig,
    rng: &Rng,
    training: bool,
) -> Result<(Tensor<T>, AttentionMode)> {
    let mode = select_mode(config, input.seq())?;
    let logits = per_example(input, rng, |ex, r| {
        let mut g = Graph::new();
        let p = ParamVars::new(&mut g, params, false);
        let enc = encoder_graph(&mut g, &p, config, ex, r, training)?;
        let hidden = if g.value(enc.hidden).shape()[0] == enc.seq {
            enc.hidden
        } else {
            g.gather_rows(enc.hidden, &(0..enc.seq).collect::<Vec<_>>())?
        };
        let logits = mlm_head_graph(&mut g, &p, config, hidden)?;
        Ok(g.value(logits).clone())
    })?;
    Ok((logits, mode))
}

/// Logits `[batch, seq, vocab]`; full attention up to `l_src` tokens, sparse beyond.
pub fn forward<T: Scalar>(
    input: &EncoderInput,
    params: &ParamStore<T>,
    config: &ModelConfig,
    rng: &Rng,
    training: bool,
) -> Result<Tensor<T>> {
    forward_with_mode(input, params, config, rng, training).map(|(l, _)| l)
}

/// A config together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Inference-mode logits for one sequence, `[seq, vocab]`.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let input = EncoderInput::single(tokens)?;
        let out = forward(&input, &self.params, &self.config, &Rng::new(0), false)?;
        let v = self.config.vocab_size;
        out.reshape(&[tokens.len(), v])
    }
}

impl Model<f32> {
    pub fn load(path: &Path) -> Result<Self> {
        let (params, config) = load_checkpoint(path)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, &self.config, path)
    }
}
