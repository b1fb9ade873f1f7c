//! Versioned binary container shared by every persisted model.
//!
//! Layout:
//!
//! ```text
//! magic (5 bytes) | version (u8) | header length (u64 LE) | header (JSON)
//! | payload: f64 LE, row-major, tensors in manifest order
//! ```
//!
//! The JSON header carries model metadata plus a `manifest` listing each
//! tensor's name, shape and byte offset into the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const FORMAT_VERSION: u8 = 1;
pub const MAGIC_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    manifest: Vec<ManifestEntry>,
}

pub fn encode(magic: &[u8; MAGIC_LEN], meta: Value, tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len() * 8;
    }
    let header = serde_json::to_vec(&Header { meta, manifest })?;
    let mut out = Vec::with_capacity(MAGIC_LEN + 9 + header.len() + offset);
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in tensors {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Magic bytes at the start of `bytes`, if present.
pub fn peek_magic(bytes: &[u8]) -> Option<[u8; MAGIC_LEN]> {
    bytes.get(..MAGIC_LEN).map(|m| m.try_into().expect("length checked"))
}

pub fn decode(magic: &[u8; MAGIC_LEN], bytes: &[u8]) -> Result<(Value, Vec<(String, Matrix)>)> {
    let found = peek_magic(bytes).ok_or_else(|| Error::Format("truncated file: no magic bytes".into()))?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let version = *bytes
        .get(MAGIC_LEN)
        .ok_or_else(|| Error::Format("truncated file: no version byte".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let len_start = MAGIC_LEN + 1;
    let len_bytes = bytes
        .get(len_start..len_start + 8)
        .ok_or_else(|| Error::Format("truncated file: no header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let header_start = len_start + 8;
    let header_bytes = header_start
        .checked_add(header_len)
        .and_then(|end| bytes.get(header_start..end))
        .ok_or_else(|| Error::Format("truncated file: header cut short".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
    let payload = &bytes[header_start + header_len..];

    let mut tensors = Vec::with_capacity(header.manifest.len());
    for entry in header.manifest {
        let n = entry
            .rows
            .checked_mul(entry.cols)
            .ok_or_else(|| Error::Format(format!("tensor `{}` has an impossible shape", entry.name)))?;
        let raw = entry
            .offset
            .checked_add(n * 8)
            .and_then(|end| payload.get(entry.offset..end))
            .ok_or_else(|| Error::Format(format!("truncated file: tensor `{}` cut short", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name, Matrix::new(entry.rows, entry.cols, data)?));
    }
    Ok((header.meta, tensors))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Looks up tensors by name, in order, checking nothing is missing.
pub(crate) struct TensorTable {
    tensors: Vec<(String, Matrix)>,
}

impl TensorTable {
    pub fn new(tensors: Vec<(String, Matrix)>) -> Self {
        Self { tensors }
    }

    pub fn take(&mut self, name: &str) -> Result<Matrix> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn take_row(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.into_vec())
    }
}
