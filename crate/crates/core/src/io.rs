//! On-disk formats: gzip-compressed little-endian volumes with JSON sidecars,
//! JSON-lines manifests and atomic file replacement.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::phantom::LobeMaskSet;
use crate::volume::{ValueDomain, Volume};
use crate::{Error, Result};

/// How a stored volume came to be.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub transforms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing: Option<[f64; 3]>,
    pub value_domain: ValueDomain,
    pub dtype: String,
    pub provenance: Provenance,
}

/// `path` with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    // mtime stays zero, so equal input gives byte-identical files
    let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

fn gunzip(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    GzDecoder::new(BufReader::new(f)).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: side, reason: e.to_string() })
}

/// Stores voxels as f32; the sidecar records shape, spacing, domain and
/// provenance.
pub fn write_volume(path: &Path, v: &Volume, provenance: &Provenance) -> Result<()> {
    let raw: Vec<u8> = v.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    atomic_write(path, &gzip(&raw))?;
    let header = VolumeHeader {
        shape: v.dims(),
        spacing: v.spacing(),
        value_domain: v.domain(),
        dtype: "f32le".into(),
        provenance: provenance.clone(),
    };
    atomic_write(&sidecar_path(path), &serde_json::to_vec_pretty(&header)?)
}

pub fn read_volume(path: &Path) -> Result<(Volume, Provenance)> {
    let header = read_header(path)?;
    if header.dtype != "f32le" {
        return Err(Error::Format { path: path.into(), reason: format!("unsupported dtype {}", header.dtype) });
    }
    let raw = gunzip(path)?;
    let n: usize = header.shape.iter().product();
    if raw.len() != n * 4 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("expected {} bytes, found {}", n * 4, raw.len()),
        });
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let mut v = Volume::new(header.shape, data, header.value_domain)
        .map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    if let Some(s) = header.spacing {
        v = v.with_spacing(s);
    }
    Ok((v, header.provenance))
}

pub fn write_lobes(path: &Path, m: &LobeMaskSet, provenance: &Provenance) -> Result<()> {
    atomic_write(path, &gzip(m.labels()))?;
    let header = VolumeHeader {
        shape: m.dims(),
        spacing: None,
        value_domain: ValueDomain::Normalized,
        dtype: "u8".into(),
        provenance: provenance.clone(),
    };
    atomic_write(&sidecar_path(path), &serde_json::to_vec_pretty(&header)?)
}

pub fn read_lobes(path: &Path) -> Result<LobeMaskSet> {
    let header = read_header(path)?;
    let raw = gunzip(path)?;
    LobeMaskSet::new(header.shape, raw).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format { path: path.into(), reason: format!("line {}: {e}", i + 1) })?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
}
