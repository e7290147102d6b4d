//! Toy-scale encoder toolkit: extend a trained full-attention encoder's
//! position table to a longer context, run it with full or block-sparse
//! attention, and measure masked-token perplexity across input lengths.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod mlm_eval;
pub mod pretrain;
pub mod sparse;
pub mod store;
pub mod taper;
pub mod tensor;
pub mod transform;

pub use encoder::{AttentionMode, EncoderInput, Model};
pub use error::{Error, Result};
pub use store::{ModelConfig, ParamStore, SparseConfig};
pub use tensor::{Rng, Scalar, Tensor};
