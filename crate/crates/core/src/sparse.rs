//! Block-sparse attention in the internal-transformer-construction style:
//! the first `g` blocks are global, every other query block attends itself,
//! the global blocks, a window of `w` neighbouring blocks and `nr` random blocks.
//!
//! Evaluation gathers the attended key/value blocks per query block, so cost
//! scales with the number of attended pairs instead of `L²`.

use serde::Serialize;

use crate::attention::{add_head_rows, attention_probs, head_backward, head_rows, AttentionShape};
use crate::error::{invalid, shape_err, Result};
use crate::exec;
use crate::store::SparseConfig;
use crate::tensor::kernels::gemm_nn;
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    SelfBlock,
    Global,
    Window,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyBlock {
    pub block: usize,
    pub kind: BlockKind,
}

/// Attended key blocks for every query block of one sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayout {
    seq_len: usize,
    block_size: usize,
    num_global: usize,
    rows: Vec<Vec<KeyBlock>>,
    random_shortfall: Vec<usize>,
}

impl SparseLayout {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn num_global(&self) -> usize {
        self.num_global
    }

    /// Key blocks attended by query block `qb`, sorted by block index.
    pub fn attended(&self, qb: usize) -> &[KeyBlock] {
        &self.rows[qb]
    }

    pub fn attended_blocks(&self, qb: usize) -> Vec<usize> {
        self.rows[qb].iter().map(|k| k.block).collect()
    }

    pub fn is_global_query(&self, qb: usize) -> bool {
        qb < self.num_global
    }

    /// How many random blocks query block `qb` could not draw because too few
    /// candidates remained.
    pub fn random_shortfall(&self, qb: usize) -> usize {
        self.random_shortfall[qb]
    }

    /// Key token indices attended by query block `qb`, in block order.
    pub fn key_positions(&self, qb: usize) -> Vec<usize> {
        let bs = self.block_size;
        self.rows[qb].iter().flat_map(|k| k.block * bs..(k.block + 1) * bs).collect()
    }

    /// Equivalent dense `[L, L]` permission mask (query-major).
    pub fn dense_mask(&self) -> Vec<bool> {
        let l = self.seq_len;
        let bs = self.block_size;
        let mut mask = vec![false; l * l];
        for (qb, row) in self.rows.iter().enumerate() {
            for kb in row {
                for i in qb * bs..(qb + 1) * bs {
                    mask[i * l + kb.block * bs..i * l + (kb.block + 1) * bs].fill(true);
                }
            }
        }
        mask
    }
}

/// Builds the layout for `seq_len` tokens. Random blocks are drawn without
/// replacement from blocks not already attended, using a generator derived
/// from `seed` and `seq_len`. `num_global_blocks` may be 0 here even though
/// model configs require at least one.
pub fn build_layout(seq_len: usize, cfg: &SparseConfig, seed: u64) -> Result<SparseLayout> {
    let bs = cfg.block_size;
    if bs == 0 || seq_len == 0 || seq_len % bs != 0 {
        return Err(invalid(format!(
            "sequence length {seq_len} is not a positive multiple of block size {bs}"
        )));
    }
    if cfg.window_blocks % 2 == 0 {
        return Err(invalid(format!("window_blocks must be odd, got {}", cfg.window_blocks)));
    }
    let nb = seq_len / bs;
    let g = cfg.num_global_blocks.min(nb);
    let half = cfg.window_blocks / 2;
    let mut rng = Rng::new(seed).fork(seq_len as u64);
    let mut rows = Vec::with_capacity(nb);
    let mut shortfall = vec![0; nb];

    for qb in 0..nb {
        let mut kinds: Vec<Option<BlockKind>> = vec![None; nb];
        let tag = |b: usize, k: BlockKind, kinds: &mut Vec<Option<BlockKind>>| {
            if kinds[b].is_none() {
                kinds[b] = Some(k);
            }
        };
        tag(qb, BlockKind::SelfBlock, &mut kinds);
        if qb < g {
            for b in 0..nb {
                tag(b, BlockKind::Global, &mut kinds);
            }
        } else {
            for b in 0..g {
                tag(b, BlockKind::Global, &mut kinds);
            }
            for b in qb.saturating_sub(half)..=(qb + half).min(nb - 1) {
                tag(b, BlockKind::Window, &mut kinds);
            }
            let candidates: Vec<usize> = (0..nb).filter(|&b| kinds[b].is_none()).collect();
            let picks = rng.sample_distinct(candidates.len(), cfg.num_random_blocks);
            shortfall[qb] = cfg.num_random_blocks - picks.len();
            for p in picks {
                tag(candidates[p], BlockKind::Random, &mut kinds);
            }
        }
        rows.push(
            kinds
                .iter()
                .enumerate()
                .filter_map(|(block, k)| k.map(|kind| KeyBlock { block, kind }))
                .collect(),
        );
    }
    Ok(SparseLayout {
        seq_len,
        block_size: bs,
        num_global: g,
        rows,
        random_shortfall: shortfall,
    })
}

/// Exact attended-pair counts for a layout.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageStats {
    pub seq_len: usize,
    pub block_size: usize,
    pub num_blocks: usize,
    pub min_keys_per_query: usize,
    pub max_keys_per_query: usize,
    /// Largest key count over non-global query blocks (0 if there are none).
    pub max_keys_non_global: usize,
    pub attended_pairs: usize,
    /// `attended_pairs / L²`.
    pub fraction: f64,
}

pub fn layout_coverage_stats(layout: &SparseLayout) -> CoverageStats {
    let bs = layout.block_size;
    let per_block: Vec<usize> = (0..layout.num_blocks()).map(|qb| layout.attended(qb).len() * bs).collect();
    let non_global = per_block.iter().enumerate().filter(|(qb, _)| !layout.is_global_query(*qb));
    let attended_pairs: usize = per_block.iter().map(|k| k * bs).sum();
    let l = layout.seq_len;
    CoverageStats {
        seq_len: l,
        block_size: bs,
        num_blocks: layout.num_blocks(),
        min_keys_per_query: per_block.iter().copied().min().unwrap_or(0),
        max_keys_per_query: per_block.iter().copied().max().unwrap_or(0),
        max_keys_non_global: non_global.map(|(_, &k)| k).max().unwrap_or(0),
        attended_pairs,
        fraction: attended_pairs as f64 / (l * l) as f64,
    }
}

/// Per-query-block forward. Returns the `[L, hidden]` output and, per query
/// block, the `[heads, block, keys]` probabilities.
pub(crate) fn sparse_attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttentionShape,
    layout: &SparseLayout,
    valid: &[bool],
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    if layout.seq_len() != s.len || valid.len() != s.len {
        return Err(shape_err(format!(
            "layout for length {} / mask of {} used with length {}",
            layout.seq_len(),
            valid.len(),
            s.len
        )));
    }
    let bs = layout.block_size();
    let blocks = exec::map_indexed(layout.num_blocks(), |qb| {
        let keys = layout.key_positions(qb);
        let nk = keys.len();
        let mut out = vec![T::zero(); bs * s.hidden];
        let mut probs = Vec::with_capacity(s.heads * bs * nk);
        for h in 0..s.heads {
            let qh = head_rows(q, s, h, qb * bs..(qb + 1) * bs);
            let kh = head_rows(k, s, h, keys.iter().copied());
            let vh = head_rows(v, s, h, keys.iter().copied());
            let p = attention_probs(&qh, &kh, bs, nk, s.head_dim, s.scale(), |_, j| !valid[keys[j]]);
            let mut oh = vec![T::zero(); bs * s.head_dim];
            gemm_nn(&p, &vh, &mut oh, bs, nk, s.head_dim);
            add_head_rows(&mut out, s, h, 0..bs, &oh);
            probs.extend_from_slice(&p);
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(s.len * s.hidden);
    let mut probs = Vec::with_capacity(blocks.len());
    for (o, p) in blocks {
        out.extend_from_slice(&o);
        probs.push(p);
    }
    Ok((out, probs))
}

pub(crate) fn sparse_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttentionShape,
    layout: &SparseLayout,
    probs: &[Vec<T>],
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let bs = layout.block_size();
    let parts = exec::map_indexed(layout.num_blocks(), |qb| {
        let keys = layout.key_positions(qb);
        let nk = keys.len();
        let mut dq = vec![T::zero(); bs * s.hidden];
        let mut dk = vec![T::zero(); nk * s.hidden];
        let mut dv = vec![T::zero(); nk * s.hidden];
        for h in 0..s.heads {
            let rows = qb * bs..(qb + 1) * bs;
            let qh = head_rows(q, s, h, rows.clone());
            let kh = head_rows(k, s, h, keys.iter().copied());
            let vh = head_rows(v, s, h, keys.iter().copied());
            let doh = head_rows(d_out, s, h, rows);
            let p = &probs[qb][h * bs * nk..(h + 1) * bs * nk];
            let (dqh, dkh, dvh) = head_backward(&qh, &kh, &vh, p, &doh, bs, nk, s.head_dim, s.scale());
            add_head_rows(&mut dq, s, h, 0..bs, &dqh);
            add_head_rows(&mut dk, s, h, 0..nk, &dkh);
            add_head_rows(&mut dv, s, h, 0..nk, &dvh);
        }
        (keys, dq, dk, dv)
    });
    let n = s.len * s.hidden;
    let (mut dq, mut dk, mut dv) = (Vec::with_capacity(n), vec![T::zero(); n], vec![T::zero(); n]);
    for (keys, dqb, dkb, dvb) in parts {
        dq.extend_from_slice(&dqb);
        for (i, &key) in keys.iter().enumerate() {
            let dst = key * s.hidden..(key + 1) * s.hidden;
            let src = i * s.hidden..(i + 1) * s.hidden;
            for (d, &x) in dk[dst.clone()].iter_mut().zip(&dkb[src.clone()]) {
                *d += x;
            }
            for (d, &x) in dv[dst].iter_mut().zip(&dvb[src]) {
                *d += x;
            }
        }
    }
    (dq, dk, dv)
}

/// Block-sparse multi-head attention over already-projected `q`, `k`, `v`
/// (each `[L, hidden]`). Keys with `valid[j] == false` get zero weight.
pub fn block_sparse_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    layout: &SparseLayout,
    valid: &[bool],
) -> Result<Tensor<T>> {
    let (len, hidden) = match q.shape() {
        [l, h] => (*l, *h),
        s => return Err(shape_err(format!("expected [L, hidden], got {s:?}"))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err("q/k/v shapes differ"));
    }
    let s = AttentionShape::new(len, hidden, heads)?;
    let (out, _) = sparse_attention_forward(q.data(), k.data(), v.data(), s, layout, valid)?;
    Tensor::new(vec![len, hidden], out)?.check_finite("block_sparse_attention")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(g: usize, w: usize, nr: usize) -> SparseConfig {
        SparseConfig {
            block_size: 4,
            num_global_blocks: g,
            window_blocks: w,
            num_random_blocks: nr,
            random_seed: 0,
        }
    }

    #[test]
    fn four_block_window_case() {
        let layout = build_layout(16, &cfg(1, 3, 0), 0).unwrap();
        assert_eq!(layout.attended_blocks(2), vec![0, 1, 2, 3]);
        let kinds: Vec<BlockKind> = layout.attended(2).iter().map(|k| k.kind).collect();
        assert_eq!(
            kinds,
            vec![BlockKind::Global, BlockKind::Window, BlockKind::SelfBlock, BlockKind::Window]
        );
        assert_eq!(layout.attended_blocks(0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn all_global_is_full_coverage() {
        let layout = build_layout(32, &cfg(8, 1, 2), 3).unwrap();
        for qb in 0..8 {
            assert_eq!(layout.attended_blocks(qb), (0..8).collect::<Vec<_>>());
        }
        assert_eq!(layout_coverage_stats(&layout).fraction, 1.0);
        assert!(layout.dense_mask().iter().all(|&b| b));
    }

    #[test]
    fn layouts_are_seeded() {
        let c = cfg(1, 3, 2);
        let a = build_layout(64, &c, 7).unwrap();
        assert_eq!(a, build_layout(64, &c, 7).unwrap());
        let differs = (1..8).any(|s| build_layout(64, &c, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn random_blocks_are_fresh_and_shortfall_recorded() {
        let layout = build_layout(64, &cfg(1, 3, 3), 1).unwrap();
        for qb in 1..layout.num_blocks() {
            let row = layout.attended(qb);
            let randoms = row.iter().filter(|k| k.kind == BlockKind::Random).count();
            assert_eq!(randoms + layout.random_shortfall(qb), 3);
            let mut blocks: Vec<usize> = row.iter().map(|k| k.block).collect();
            blocks.dedup();
            assert_eq!(blocks.len(), row.len());
        }
        // 4 blocks: block 2 has {0,1,2,3} already, so no random is possible.
        let tiny = build_layout(16, &cfg(1, 3, 1), 0).unwrap();
        assert_eq!(tiny.random_shortfall(2), 1);
    }

    #[test]
    fn rejects_unaligned_lengths() {
        assert!(build_layout(18, &cfg(1, 3, 1), 0).is_err());
        assert!(build_layout(16, &cfg(1, 2, 1), 0).is_err());
    }

    #[test]
    fn coverage_counts() {
        let c = SparseConfig::default();
        let stats = layout_coverage_stats(&build_layout(256, &c, 0).unwrap());
        assert!(stats.max_keys_non_global <= (3 + 1 + 1) * 16);
        assert_eq!(stats.max_keys_per_query, 256);
        assert_eq!(stats.attended_pairs, 89 * 16 * 16);
    }
}
