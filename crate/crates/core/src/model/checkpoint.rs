//! Binary checkpoint format.
//!
//! ```text
//! "AMOS"                         4 bytes
//! version                        u32 LE
//! config length, config text     u32 LE, UTF-8 canonical key=value lines
//! for each parameter, sorted by name:
//!     name length, name          u32 LE, UTF-8
//!     rank                       u32 LE
//!     dims                       rank × u32 LE
//!     values                     numel × f32 LE
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{Model, ModelConfig};
use crate::numerics::Real;

const MAGIC: &[u8; 4] = b"AMOS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &model.config().canonical());
    let params = model.params();
    for id in params.sorted_ids() {
        let p = params.get(id);
        put_str(&mut out, &p.name);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<&'a str, String> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| format!("{what} is not UTF-8: {e}"))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Decodes a checkpoint. When `expected` is given, the embedded config
/// must equal it.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<Model<f32>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic, not an AMOS checkpoint".into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        ));
    }
    let text = r.string("config")?;
    let kv = KvMap::parse(text).map_err(|e| e.to_string())?;
    let config = ModelConfig::from_kv(&kv).map_err(|e| e.to_string())?;
    if config.canonical() != text {
        return Err("embedded config is not in canonical form".into());
    }
    if let Some(exp) = expected {
        if exp != &config {
            return Err(format!(
                "config mismatch: checkpoint has\n{}expected\n{}",
                config.canonical(),
                exp.canonical()
            ));
        }
    }
    let mut model = Model::<f32>::new(config, 0).map_err(|e| e.to_string())?;
    let mut seen = HashSet::new();
    while !r.done() {
        let name = r.string("parameter name")?;
        let id = model
            .params()
            .by_name(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if !seen.insert(id) {
            return Err(format!("duplicate parameter {name}"));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let p = model.params_mut().get_mut(id);
        if dims != p.tensor.shape() {
            return Err(format!(
                "{name}: shape {dims:?}, expected {:?}",
                p.tensor.shape()
            ));
        }
        let raw = r.take(4 * p.numel(), name)?;
        for (dst, b) in p.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if seen.len() != model.params().len() {
        return Err(format!(
            "checkpoint holds {} of {} parameters",
            seen.len(),
            model.params().len()
        ));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, expected).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
