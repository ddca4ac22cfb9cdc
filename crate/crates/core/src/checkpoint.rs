//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `STARFLOW`, format version (u32), model
//! configuration as JSON (u64 length + bytes), metadata as JSON (u64 length +
//! bytes), parameter count (u32), then per parameter its name (u32 length +
//! UTF-8), rank (u32), extents (u64 each) and values (f64 each).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, StarFlow};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STARFLOW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Free-form provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub stage: String,
    /// Set when the checkpoint was written because training diverged.
    #[serde(default)]
    pub diagnostic: Option<String>,
}

pub fn encode(model: &StarFlow, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for json in [
        serde_json::to_vec(&model.config),
        serde_json::to_vec(meta),
    ] {
        let json = json.map_err(|e| Error::Serde(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
    }
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::format(self.path, self.pos as u64, "length overflow"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(StarFlow, CheckpointMeta)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "not a checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n = c.len("config length")?;
    let at = c.pos as u64;
    let config: ModelConfig = serde_json::from_slice(c.take(n, "config")?)
        .map_err(|e| Error::format(path, at, format!("config: {e}")))?;
    let n = c.len("metadata length")?;
    let at = c.pos as u64;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(n, "metadata")?)
        .map_err(|e| Error::format(path, at, format!("metadata: {e}")))?;

    let mut model = StarFlow::new(config, 0)?;
    let count = c.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {count} parameters, configuration defines {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let n = c.u32("name length")? as usize;
        let at = c.pos as u64;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::format(path, at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.len("extent"))
            .collect::<Result<Vec<_>>>()?;
        let p = model
            .params
            .by_name_mut(&name)
            .ok_or_else(|| Error::Incompatible(format!("unknown parameter {name}")))?;
        if p.shape != shape {
            return Err(Error::Incompatible(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                p.shape
            )));
        }
        let raw = c.take(8 * p.value.len(), "values")?;
        for (v, b) in p.value.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, c.pos as u64, "trailing bytes"));
    }
    Ok((model, meta))
}

pub fn save(model: &StarFlow, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(StarFlow, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
