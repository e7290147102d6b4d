//! Transplanting a full-attention source checkpoint into the extended,
//! sparse-capable target architecture, and checking that the result still
//! produces the source's logits on source-length inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::encoder::{forward, EncoderInput, Model};
use crate::error::{invalid, shape_err, Result};
use crate::exec;
use crate::store::{names, LnOrder, ModelConfig, ParamStore, SparseConfig, INIT_STD};
use crate::taper::{extend_positions, repeat_positions, TaperConfig, DEFAULT_TAU};
use crate::tensor::{Rng, Scalar, Tensor};

/// How position rows beyond `l_src` are filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// Fresh truncated-normal rows drawn from `seed`.
    Vanilla { seed: u64 },
    /// Exact tiling of the source rows.
    Repeated,
    /// Attenuated copies with temperature `tau`.
    Taper { tau: f64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla { .. } => "vanilla",
            Variant::Repeated => "repeated",
            Variant::Taper { .. } => "taper",
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self {
            Variant::Taper { tau } => Some(*tau),
            _ => None,
        }
    }

    /// Parses `vanilla`, `repeated`, `taper` or `taper:T`. Vanilla rows use `seed`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let text = text.trim();
        match text {
            "vanilla" => Ok(Variant::Vanilla { seed }),
            "repeated" => Ok(Variant::Repeated),
            "taper" => Ok(Variant::Taper { tau: DEFAULT_TAU }),
            _ => {
                let tau = text
                    .strip_prefix("taper:")
                    .ok_or_else(|| invalid(format!("unknown variant {text:?}")))?;
                let tau = f64::from_str(tau).map_err(|_| invalid(format!("bad temperature in {text:?}")))?;
                Ok(Variant::Taper { tau })
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Taper { tau } => write!(f, "taper:{tau}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Target-side settings not inherited from the source.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetOverrides {
    /// Defaults to the source config's `l_tgt`.
    pub l_tgt: Option<usize>,
    pub sparse: SparseConfig,
}

impl Default for TargetOverrides {
    fn default() -> Self {
        Self {
            l_tgt: None,
            sparse: SparseConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Copied,
    Duplicated,
    SlicedExtended,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorProvenance {
    pub provenance: Provenance,
    pub source: String,
    pub source_shape: Vec<usize>,
    pub target_shape: Vec<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransformReport {
    pub variant: Variant,
    pub l_src: usize,
    pub l_tgt: usize,
    pub repetitions: usize,
    pub factors: Vec<f64>,
    pub steps: Vec<String>,
    pub ln_reordered: bool,
    pub tensors: BTreeMap<String, TensorProvenance>,
    pub consistency: Option<ConsistencyReport>,
}

fn check_source(config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if config.sparse.is_some() {
        return Err(invalid("source model must be full-attention only"));
    }
    if config.num_segment_types != 1 {
        return Err(invalid(format!(
            "source model must have one segment type, got {}",
            config.num_segment_types
        )));
    }
    Ok(())
}

/// Target config implied by a source config.
pub fn target_config(src: &ModelConfig, overrides: &TargetOverrides) -> Result<ModelConfig> {
    check_source(src)?;
    let cfg = ModelConfig {
        l_tgt: overrides.l_tgt.unwrap_or(src.l_tgt),
        num_segment_types: 2,
        position_offset: 0,
        ln_order: LnOrder::DropoutThenLnEverywhere,
        sparse: Some(overrides.sparse.clone()),
        ..src.clone()
    };
    if cfg.l_tgt % cfg.l_src != 0 {
        return Err(invalid(format!(
            "l_tgt {} is not a multiple of l_src {}",
            cfg.l_tgt, cfg.l_src
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the variant target model.
pub fn variant_model<T: Scalar>(
    src: &Model<T>,
    variant: Variant,
    overrides: &TargetOverrides,
) -> Result<(Model<T>, TransformReport)> {
    src.params.validate(&src.config)?;
    let config = target_config(&src.config, overrides)?;
    let (l_src, offset, h) = (src.config.l_src, src.config.position_offset, src.config.hidden_dim);
    let r = config.l_tgt / l_src;

    let src_pos = src.params.get(names::POS_EMB)?;
    let sliced = src_pos.slice_rows(offset, offset + l_src)?;
    let (pos, factors, detail) = match variant {
        Variant::Taper { tau } => {
            let cfg = TaperConfig::new(tau, r)?;
            (extend_positions(&sliced, cfg)?, cfg.factors(), format!("attenuated copies, tau {tau}"))
        }
        Variant::Repeated => (repeat_positions(&sliced, r)?, vec![1.0; r], "tiled copies".to_string()),
        Variant::Vanilla { seed } => {
            let mut rng = Rng::new(seed);
            let fresh = Tensor::from_fn(&[(r - 1) * l_src, h], |_| T::of(rng.trunc_normal(INIT_STD)));
            (
                Tensor::concat_rows(&[sliced, fresh])?,
                Vec::new(),
                format!("rows beyond {l_src} drawn fresh from seed {seed}"),
            )
        }
    };

    let seg = src.params.get(names::SEG_EMB)?;
    let seg2 = Tensor::concat_rows(&[seg.clone(), seg.clone()])?;

    let mut params = ParamStore::new();
    let mut tensors = BTreeMap::new();
    for (name, t) in src.params.iter() {
        let (value, provenance, detail) = match name.as_str() {
            names::POS_EMB => (
                pos.clone(),
                Provenance::SlicedExtended,
                format!("rows [{offset}, {}) of the source, then {detail}", offset + l_src),
            ),
            names::SEG_EMB => (seg2.clone(), Provenance::Duplicated, "row 1 duplicates row 0".to_string()),
            _ => (t.clone(), Provenance::Copied, String::new()),
        };
        tensors.insert(
            name.clone(),
            TensorProvenance {
                provenance,
                source: name.clone(),
                source_shape: t.shape().to_vec(),
                target_shape: value.shape().to_vec(),
                detail,
            },
        );
        params.insert(name.clone(), value);
    }
    params.validate(&config)?;

    let steps = vec![
        "duplicate segment embedding".to_string(),
        format!("slice position rows [{offset}, {})", offset + l_src),
        format!("extend positions to {} rows ({})", config.l_tgt, variant),
        "move embedding layer norm after dropout".to_string(),
        "enable block-sparse attention beyond l_src".to_string(),
    ];
    let report = TransformReport {
        variant,
        l_src,
        l_tgt: config.l_tgt,
        repetitions: r,
        factors,
        steps,
        ln_reordered: src.config.ln_order != config.ln_order,
        tensors,
        consistency: None,
    };
    Ok((Model { config, params }, report))
}

/// Taper transform with temperature `tau`.
pub fn transform_model<T: Scalar>(
    src: &Model<T>,
    overrides: &TargetOverrides,
    tau: f64,
) -> Result<(Model<T>, TransformReport)> {
    variant_model(src, Variant::Taper { tau }, overrides)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailedSample {
    pub index: usize,
    pub tokens: Vec<u32>,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub precision: &'static str,
    pub samples: usize,
    pub max_len: usize,
    pub tol: f64,
    pub max_abs_diff: f64,
    /// Target run with every segment id set to 1, compared against the source.
    pub segment_one_max_abs_diff: f64,
    /// Training-mode difference on the first sample; informational only.
    pub training_mode_max_abs_diff: Option<f64>,
    pub passed: bool,
    pub failures: Vec<FailedSample>,
}

/// Random verification inputs: lengths uniform in `[1, max_len]`, tokens
/// uniform over the vocabulary minus the pad id.
pub fn sample_inputs(config: &ModelConfig, n: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = Rng::new(seed);
    let pad = config.pad_token_id;
    (0..n)
        .map(|_| {
            let len = rng.range_inclusive(1, max_len);
            (0..len)
                .map(|_| {
                    let t = rng.below(config.vocab_size - 1) as u32;
                    if t >= pad {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect()
        })
        .collect()
}

/// Compares inference logits of `src` and `tgt` on `n` random inputs no longer
/// than `max_len` (capped at `l_src`).
pub fn verify_consistency<T: Scalar>(
    src: &Model<T>,
    tgt: &Model<T>,
    n: usize,
    max_len: usize,
    tol: f64,
    seed: u64,
) -> Result<ConsistencyReport> {
    if src.config.vocab_size != tgt.config.vocab_size {
        return Err(shape_err("source and target vocabularies differ"));
    }
    let max_len = max_len.min(src.config.l_src).min(tgt.config.l_src);
    if n == 0 || max_len == 0 {
        return Err(invalid("need at least one sample of positive length"));
    }
    let inputs = sample_inputs(&src.config, n, max_len, seed);
    let eval_rng = Rng::new(seed);
    let diffs = exec::map(&inputs, |tokens| -> Result<(f64, f64)> {
        let input = EncoderInput::single(tokens)?;
        let a = forward(&input, &src.params, &src.config, &eval_rng, false)?;
        let b = forward(&input, &tgt.params, &tgt.config, &eval_rng, false)?;
        let seg_one = input.clone().with_segments(vec![1; tokens.len()])?;
        let c = forward(&seg_one, &tgt.params, &tgt.config, &eval_rng, false)?;
        Ok((a.max_abs_diff(&b)?, a.max_abs_diff(&c)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let training_mode_max_abs_diff = if src.config.dropout_prob > 0.0 {
        let input = EncoderInput::single(&inputs[0])?;
        let rng = Rng::new(seed ^ 0x5eed);
        let a = forward(&input, &src.params, &src.config, &rng, true)?;
        let b = forward(&input, &tgt.params, &tgt.config, &rng, true)?;
        Some(a.max_abs_diff(&b)?)
    } else {
        None
    };

    let failures: Vec<FailedSample> = diffs
        .iter()
        .enumerate()
        .filter(|(_, (d, s))| !(*d <= tol && *s <= tol))
        .map(|(index, (d, s))| FailedSample {
            index,
            tokens: inputs[index].clone(),
            max_abs_diff: d.max(*s),
        })
        .collect();
    Ok(ConsistencyReport {
        precision: T::NAME,
        samples: n,
        max_len,
        tol,
        max_abs_diff: diffs.iter().map(|d| d.0).fold(0.0, f64::max),
        segment_one_max_abs_diff: diffs.iter().map(|d| d.1).fold(0.0, f64::max),
        training_mode_max_abs_diff,
        passed: failures.is_empty(),
        failures,
    })
}
