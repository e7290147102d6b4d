use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where layer norm sits relative to dropout in the embedding block.
/// Every other block always applies dropout first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnOrder {
    LnThenDropoutInEmbeddings,
    DropoutThenLnEverywhere,
}

/// Block-sparse attention layout parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseConfig {
    pub block_size: usize,
    pub num_global_blocks: usize,
    /// Odd number of consecutive blocks centered on the query block.
    pub window_blocks: usize,
    pub num_random_blocks: usize,
    pub random_seed: u64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            num_global_blocks: 1,
            window_blocks: 3,
            num_random_blocks: 1,
            random_seed: 0,
        }
    }
}

impl SparseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if self.window_blocks % 2 == 0 {
            return Err(Error::Config(format!(
                "window_blocks must be odd, got {}",
                self.window_blocks
            )));
        }
        if self.num_global_blocks == 0 {
            return Err(Error::Config("num_global_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

/// Architecture hyperparameters. Serialized as a TOML document whose keys are
/// exactly these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Longest input handled with full attention.
    pub l_src: usize,
    /// Longest input handled in sparse mode.
    pub l_tgt: usize,
    pub num_segment_types: usize,
    /// Row of the position table read for token position 0.
    pub position_offset: usize,
    pub ln_order: LnOrder,
    pub dropout_prob: f64,
    pub layer_norm_eps: f64,
    pub pad_token_id: u32,
    pub sep_token_id: u32,
    pub mask_token_id: u32,
    pub sparse: Option<SparseConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_source()
    }
}

impl ModelConfig {
    /// Desk-scale source model: full attention only, offset-2 positions,
    /// one segment type, layer norm before dropout in the embeddings.
    pub fn desk_source() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            l_src: 64,
            l_tgt: 256,
            num_segment_types: 1,
            position_offset: 2,
            ln_order: LnOrder::LnThenDropoutInEmbeddings,
            dropout_prob: 0.1,
            layer_norm_eps: crate::tensor::LN_EPS,
            pad_token_id: 0,
            sep_token_id: 1,
            mask_token_id: 2,
            sparse: None,
        }
    }

    /// Desk-scale extended model with the default sparse layout.
    pub fn desk_target() -> Self {
        Self {
            num_segment_types: 2,
            position_offset: 0,
            ln_order: LnOrder::DropoutThenLnEverywhere,
            sparse: Some(SparseConfig::default()),
            ..Self::desk_source()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Longest accepted input.
    pub fn max_len(&self) -> usize {
        if self.sparse.is_some() {
            self.l_tgt
        } else {
            self.l_src
        }
    }

    /// Rows in the position table.
    pub fn position_rows(&self) -> usize {
        self.max_len() + self.position_offset
    }

    /// `l_tgt / l_src`, defined when `l_tgt` is an exact multiple.
    pub fn repetitions(&self) -> Option<usize> {
        (self.l_src > 0 && self.l_tgt % self.l_src == 0).then(|| self.l_tgt / self.l_src)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, hidden_dim, num_heads and ffn_dim must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.l_src == 0 || self.l_tgt < self.l_src {
            return fail(format!("need 0 < l_src <= l_tgt, got {} / {}", self.l_src, self.l_tgt));
        }
        if !(1..=2).contains(&self.num_segment_types) {
            return fail(format!("num_segment_types must be 1 or 2, got {}", self.num_segment_types));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return fail(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        for (name, id) in [
            ("pad_token_id", self.pad_token_id),
            ("sep_token_id", self.sep_token_id),
            ("mask_token_id", self.mask_token_id),
        ] {
            if id as usize >= self.vocab_size {
                return fail(format!("{name} {id} outside vocabulary of {}", self.vocab_size));
            }
        }
        if let Some(sp) = &self.sparse {
            sp.validate()?;
            if self.l_tgt % self.l_src != 0 {
                return fail(format!(
                    "l_tgt {} must be an integer multiple of l_src {}",
                    self.l_tgt, self.l_src
                ));
            }
            if self.l_src % sp.block_size != 0 || self.l_tgt % sp.block_size != 0 {
                return fail(format!(
                    "l_src {} and l_tgt {} must be multiples of block_size {}",
                    self.l_src, self.l_tgt, sp.block_size
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_configs_are_valid() {
        ModelConfig::desk_source().validate().unwrap();
        ModelConfig::desk_target().validate().unwrap();
        assert_eq!(ModelConfig::desk_target().repetitions(), Some(4));
        assert_eq!(ModelConfig::desk_source().position_rows(), 66);
        assert_eq!(ModelConfig::desk_target().position_rows(), 256);
    }

    #[test]
    fn toml_round_trip_keeps_field_names() {
        let cfg = ModelConfig::desk_target();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("l_src = 64"));
        assert!(text.contains("ln_order = \"dropout_then_ln_everywhere\""));
        assert!(text.contains("[sparse]"));
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
        let src = ModelConfig::desk_source();
        assert_eq!(ModelConfig::from_toml(&src.to_toml().unwrap()).unwrap(), src);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = ModelConfig::desk_target();
        c.l_tgt = 200;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_source();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_target();
        c.sparse.as_mut().unwrap().window_blocks = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_source();
        c.num_segment_types = 3;
        assert!(c.validate().is_err());
    }
}
