//! Checkpoint container.
//!
//! ```text
//! "TPRC"                       magic
//! u32 LE                       format version (1)
//! u32 LE + UTF-8               config document (TOML, ModelConfig field names)
//! repeated, sorted by name:
//!   u32 LE + UTF-8             tensor name
//!   u32 LE                     rank
//!   rank × u64 LE              extents
//!   product(extents) × f32 LE  values
//! ```
//!
//! The file ends after the last tensor; there is no count or trailer.

use std::path::Path;

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPRC";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Format("string too long".into()))?;
    put_u32(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes a store and its config.
pub fn encode_checkpoint(store: &ParamStore, config: &ModelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    store.validate(config)?;
    let mut out = Vec::with_capacity(16 + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &config.to_toml()?)?;
    for (name, t) in store.iter() {
        put_str(&mut out, name)?;
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses bytes produced by [`encode_checkpoint`] and validates tensors against the config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_toml(&r.string("config")?)?;
    let specs = super::params::parameter_specs(&config);
    let mut store = ParamStore::new();
    while !r.done() {
        let name = r.string("tensor name")?;
        if !specs.contains_key(&name) {
            return Err(Error::Format(format!("unknown tensor name {name}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("tensor {name} has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64("extent")?).map_err(|_| Error::Format("extent overflow".into()))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("extent overflow".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("extent overflow".into()))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        if store.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    store.validate(&config)?;
    Ok((store, config))
}

pub fn save_checkpoint(store: &ParamStore, config: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, ModelConfig)> {
    decode_checkpoint(&std::fs::read(path)?)
}
