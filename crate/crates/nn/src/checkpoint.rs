//! Weight blobs with a JSON sidecar.
//!
//! Blob layout, little endian: `VRCK`, format version (u32), parameter
//! count (u32), then per parameter its name (u32 length + UTF-8), rank
//! (u32), dims (u64 each) and values (f64 each). The sidecar records the
//! architecture id, the model config with its SHA-256, the step count and
//! metrics at save time. Loading refuses any architecture or config drift.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volrep_core::io::{atomic_write, read_json, sidecar_path, write_json};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VRCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub step: usize,
    pub metrics: Vec<(String, f64)>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CheckpointMismatch("truncated weight blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a blob into `(name, tensor)` pairs in stored order.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointMismatch("not a weight blob".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!("unsupported blob version {version}")));
    }
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointMismatch("trailing bytes after the last parameter".into()));
    }
    Ok(out)
}

pub fn save<C: Serialize>(
    path: &Path,
    architecture: &str,
    config: &C,
    params: &ParamStore,
    step: usize,
    metrics: Vec<(String, f64)>,
) -> Result<()> {
    let config = serde_json::to_value(config)?;
    let meta = CheckpointMeta {
        architecture: architecture.into(),
        config_hash: config_hash(&config),
        config,
        step,
        metrics,
    };
    atomic_write(path, &encode_params(params))?;
    write_json(&sidecar_path(path), &meta)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::io(&side, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(read_json(&side)?)
}

/// Loads weights saved by [`save`] into `params`, which must come from a
/// model built with the same architecture and config.
pub fn load_into<C: Serialize>(path: &Path, architecture: &str, config: &C, params: &mut ParamStore) -> Result<CheckpointMeta> {
    let meta = read_meta(path)?;
    if meta.architecture != architecture {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds a {} model, expected {architecture}",
            meta.architecture
        )));
    }
    let expected = config_hash(&serde_json::to_value(config)?);
    if meta.config_hash != expected {
        return Err(Error::CheckpointMismatch("model config differs from the one the checkpoint was trained with".into()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stored = decode_params(&bytes)?;
    if stored.len() != params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{} stored parameters, model has {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, t) in stored {
        let id = params.id(&name).ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter {name}")))?;
        if params.get(id).shape() != t.shape() {
            return Err(Error::CheckpointMismatch(format!("shape of {name} differs")));
        }
        *params.get_mut(id) = t;
    }
    Ok(meta)
}
