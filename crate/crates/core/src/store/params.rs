use std::collections::BTreeMap;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Canonical parameter names.
pub mod names {
    pub const WORD_EMB: &str = "word_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const SEG_EMB: &str = "seg_emb";
    pub const EMB_LN_GAMMA: &str = "emb_ln.gamma";
    pub const EMB_LN_BETA: &str = "emb_ln.beta";
    pub const MLM_DENSE_W: &str = "mlm.dense.weight";
    pub const MLM_DENSE_B: &str = "mlm.dense.bias";
    pub const MLM_LN_GAMMA: &str = "mlm.ln.gamma";
    pub const MLM_LN_BETA: &str = "mlm.ln.beta";
    pub const MLM_BIAS: &str = "mlm.bias";

    /// `layers.{i}.{suffix}`, e.g. `layers.0.q.weight`.
    pub fn layer(i: usize, suffix: &str) -> String {
        format!("layers.{i}.{suffix}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal(0, 0.02).
    Normal,
    Zeros,
    Ones,
}

pub const INIT_STD: f64 = 0.02;

/// Every parameter the config implies: name, shape and initializer.
pub fn parameter_specs(config: &ModelConfig) -> BTreeMap<String, (Vec<usize>, Init)> {
    let (h, f, v) = (config.hidden_dim, config.ffn_dim, config.vocab_size);
    let mut specs = BTreeMap::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.insert(name, (shape, init));
    };
    add(names::WORD_EMB.into(), vec![v, h], Init::Normal);
    add(names::POS_EMB.into(), vec![config.position_rows(), h], Init::Normal);
    add(names::SEG_EMB.into(), vec![config.num_segment_types, h], Init::Zeros);
    add(names::EMB_LN_GAMMA.into(), vec![h], Init::Ones);
    add(names::EMB_LN_BETA.into(), vec![h], Init::Zeros);
    for i in 0..config.num_layers {
        for proj in ["q", "k", "v", "o"] {
            add(names::layer(i, &format!("{proj}.weight")), vec![h, h], Init::Normal);
            add(names::layer(i, &format!("{proj}.bias")), vec![h], Init::Zeros);
        }
        add(names::layer(i, "attn_ln.gamma"), vec![h], Init::Ones);
        add(names::layer(i, "attn_ln.beta"), vec![h], Init::Zeros);
        add(names::layer(i, "ffn_in.weight"), vec![h, f], Init::Normal);
        add(names::layer(i, "ffn_in.bias"), vec![f], Init::Zeros);
        add(names::layer(i, "ffn_out.weight"), vec![f, h], Init::Normal);
        add(names::layer(i, "ffn_out.bias"), vec![h], Init::Zeros);
        add(names::layer(i, "ffn_ln.gamma"), vec![h], Init::Ones);
        add(names::layer(i, "ffn_ln.beta"), vec![h], Init::Zeros);
    }
    add(names::MLM_DENSE_W.into(), vec![h, h], Init::Normal);
    add(names::MLM_DENSE_B.into(), vec![h], Init::Zeros);
    add(names::MLM_LN_GAMMA.into(), vec![h], Init::Ones);
    add(names::MLM_LN_BETA.into(), vec![h], Init::Zeros);
    add(names::MLM_BIAS.into(), vec![v], Init::Zeros);
    specs
}

/// Named model parameters, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the names and shapes are exactly those `config` implies.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let specs = parameter_specs(config);
        for name in self.tensors.keys() {
            if !specs.contains_key(name) {
                return Err(Error::Format(format!("unknown tensor name {name}")));
            }
        }
        for (name, (shape, _)) in &specs {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// True when both stores hold the same names with bit-identical values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Fresh parameters: truncated-normal(0, 0.02) weights and embeddings, zero
/// biases, unit layer-norm gains, all-zero segment embeddings. Draws happen in
/// name order from one generator.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    for (name, (shape, init)) in parameter_specs(config) {
        let t = match init {
            Init::Normal => Tensor::from_fn(&shape, |_| rng.trunc_normal(INIT_STD) as f32),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
        };
        store.insert(name, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_embeddings_start_at_zero() {
        let store = init_random(&ModelConfig::desk_source(), 1).unwrap();
        assert!(store.get(names::SEG_EMB).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(store.get(names::SEG_EMB).unwrap().shape(), &[1, 64]);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk_source();
        let a = init_random(&cfg, 9).unwrap();
        assert!(a.bit_eq(&init_random(&cfg, 9).unwrap()));
        assert!(!a.bit_eq(&init_random(&cfg, 10).unwrap()));
    }

    #[test]
    fn position_table_includes_offset_rows() {
        let store = init_random(&ModelConfig::desk_source(), 0).unwrap();
        assert_eq!(store.get(names::POS_EMB).unwrap().shape(), &[66, 64]);
    }

    #[test]
    fn weights_are_truncated_at_two_std() {
        let store = init_random(&ModelConfig::desk_source(), 4).unwrap();
        let w = store.get(names::WORD_EMB).unwrap();
        assert!(w.data().iter().all(|x| x.abs() as f64 <= 2.0 * INIT_STD + 1e-7));
        let mean = w.data().iter().map(|&x| x as f64).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 1e-3);
        store.validate(&ModelConfig::desk_source()).unwrap();
    }
}
