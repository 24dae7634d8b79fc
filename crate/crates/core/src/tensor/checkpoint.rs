//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, u32 version, 32-byte SHA-256 digest of the
//! config text, u64-prefixed config text, u64 parameter count, then per
//! parameter a u32-prefixed name, dtype tag, u32 rank, u64 extents and the
//! raw values.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::dense::{numel, Tensor};
use super::params::ParamStore;
use super::scalar::{DType, Scalar};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EQGRCKPT";
const VERSION: u32 = 1;

pub fn config_digest(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub digest: [u8; 32],
    pub entries: Vec<CheckpointEntry>,
}

pub fn encode_checkpoint<T: Scalar>(config_text: &str, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(config_text));
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config_text: &str, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(config_text, params);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u64()? as usize;
    let config_text = r.string(len)?;
    if config_digest(&config_text) != digest {
        return Err(Error::Checkpoint("config digest does not match stored config".into()));
    }
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for `{name}`")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = dtype.size_of();
        let raw = r.take(numel(&shape) * size)?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(size).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(size).map(f64::read_le).collect(),
        };
        entries.push(CheckpointEntry { name, dtype, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { config_text, digest, entries })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Copies stored values into `params` by name. The stored config digest
    /// must equal `expected` unless `force` is set.
    pub fn restore<T: Scalar>(&self, params: &mut ParamStore<T>, expected: &[u8; 32], force: bool) -> Result<()> {
        if &self.digest != expected && !force {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {} vs model {} (use --force to override)",
                digest_hex(&self.digest),
                digest_hex(expected)
            )));
        }
        let mut src = ParamStore::new();
        for e in &self.entries {
            src.add(e.name.clone(), Tensor::from_f64(e.shape.clone(), &e.values)?);
        }
        params.load_from(&src)
    }
}
