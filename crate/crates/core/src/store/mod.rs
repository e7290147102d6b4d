//! Model configuration, named parameter storage and the checkpoint format.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{LnOrder, ModelConfig, SparseConfig};
pub use params::{init_random, names, parameter_specs, Init, ParamStore, INIT_STD};
