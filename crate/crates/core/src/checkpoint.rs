//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header,
//! then every tensor's values as little-endian `f64` in header order. Files are
//! written to a temporary sibling and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    step: u64,
    config: serde_json::Value,
    extra: serde_json::Value,
    sections: Vec<SectionHeader>,
}

pub type NamedTensors = Vec<(String, Tensor)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"vae"` or `"cldm"`.
    pub kind: String,
    /// Fingerprint of the configuration the parameters were trained under.
    pub fingerprint: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    pub sections: Vec<(String, NamedTensors)>,
}

impl Checkpoint {
    pub fn new(kind: &str, fingerprint: &str, step: u64, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            fingerprint: fingerprint.into(),
            step,
            config,
            extra: serde_json::Value::Null,
            sections: Vec::new(),
        }
    }

    pub fn with_section(mut self, name: &str, tensors: NamedTensors) -> Self {
        self.sections.push((name.into(), tensors));
        self
    }

    pub fn section(&self, name: &str) -> Option<&NamedTensors> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_section(&mut self, name: &str) -> Result<NamedTensors> {
        let pos = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint has no section {name}", self.kind)))?;
        Ok(self.sections.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            step: self.step,
            config: self.config.clone(),
            extra: self.extra.clone(),
            sections: self
                .sections
                .iter()
                .map(|(name, ts)| SectionHeader {
                    name: name.clone(),
                    tensors: ts
                        .iter()
                        .map(|(n, t)| TensorHeader {
                            name: n.clone(),
                            shape: t.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let values: usize = self.sections.iter().flat_map(|(_, ts)| ts).map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, ts) in &self.sections {
            for (_, t) in ts {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let mut ts = Vec::with_capacity(s.tensors.len());
            for th in s.tensors {
                let n: usize = th.shape.iter().product();
                let raw = bytes
                    .get(pos..pos + 8 * n)
                    .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", th.name)))?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                pos += 8 * n;
                ts.push((th.name, Tensor::new(th.shape, data)));
            }
            sections.push((s.name, ts));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            fingerprint: header.fingerprint,
            step: header.step,
            config: header.config,
            extra: header.extra,
            sections,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Reads and checks the model kind and, unless `force`, the config fingerprint.
    pub fn read_expecting(path: &Path, kind: &str, fingerprint: Option<&str>, force: bool) -> Result<Self> {
        let ck = Self::read(path)?;
        if ck.kind != kind {
            return Err(Error::Config(format!(
                "{} holds a {} checkpoint, expected {kind}",
                path.display(),
                ck.kind
            )));
        }
        if let Some(fp) = fingerprint {
            if fp != ck.fingerprint && !force {
                return Err(Error::Config(format!(
                    "{} was trained under config {} but the current config is {fp}; pass --force to load anyway",
                    path.display(),
                    ck.fingerprint
                )));
            }
        }
        Ok(ck)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Short stable hash of a serializable configuration (first 16 hex digits of SHA-256
/// over its JSON form).
pub fn fingerprint<T: Serialize + ?Sized>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))[..16].to_string()
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Follows a `best.ckpt` pointer file (a single relative or absolute path) if `path`
/// is one; otherwise returns `path` unchanged.
pub fn resolve_pointer(path: &Path) -> Result<PathBuf> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        return Ok(path.to_path_buf());
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Checkpoint(format!("{} is neither a checkpoint nor a pointer", path.display())))?;
    let target = PathBuf::from(text.trim());
    Ok(if target.is_absolute() {
        target
    } else {
        path.parent().unwrap_or(Path::new(".")).join(target)
    })
}
