//! Versioned container of named fp64 tensors.
//!
//! Layout: the magic line, one JSON header line, then the little-endian
//! tensor payload. The header records every tensor's name, shape and offset,
//! the payload length, its SHA-256, and free-form metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "refpose-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<Entry>,
    payload_bytes: usize,
    sha256: String,
    meta: serde_json::Value,
}

/// Named tensors plus JSON metadata, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(8 * self.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            tensors: entries,
            payload_bytes: payload.len(),
            sha256: hex(&Sha256::digest(&payload)),
            meta: self.meta.clone(),
        };
        let mut out = format!("{MAGIC} v{FORMAT_VERSION}\n").into_bytes();
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        let magic = std::str::from_utf8(magic).map_err(|_| corrupt("unreadable magic line".into()))?;
        let Some(version) = magic.strip_prefix(MAGIC).and_then(|v| v.strip_prefix(" v")) else {
            return Err(corrupt(format!("not a {MAGIC} file")));
        };
        let version: u32 = version.parse().map_err(|_| corrupt(format!("bad version tag {version:?}")))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let header = lines.next().ok_or_else(|| corrupt("missing header".into()))?;
        let header: Header = serde_json::from_slice(header).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: header.version.to_string(),
            });
        }
        let payload = lines.next().unwrap_or_default();
        if payload.len() != header.payload_bytes {
            return Err(corrupt(format!(
                "payload is {} bytes, header promises {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex(&Sha256::digest(payload)) != header.sha256 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(format!("tensor {} overruns the payload", e.name)))?;
            let t = Tensor::new(&e.shape, data.to_vec()).map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
