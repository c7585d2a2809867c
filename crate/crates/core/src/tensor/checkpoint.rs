//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32 header_len | header JSON | u32 blob_count
//! blob*: u16 name_len | name | u8 rank | u32 dim * rank | u8 dtype | values
//! 32-byte SHA-256 over every blob byte
//! ```
//!
//! The header JSON is `{format_version, model_kind, config, vocab_checksum}`.
//! Values are stored as `f64` (dtype 0) so a load/save cycle is bit-exact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("blob checksum does not match")]
    ChecksumFailure,
    #[error("vocabulary checksum mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: String,
    pub config: serde_json::Value,
    pub vocab_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Self {
        Self {
            header,
            blobs: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        let blobs_start = out.len();
        for (name, t) in &self.blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out[blobs_start..]);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                expected: format!("format_version {CHECKPOINT_FORMAT_VERSION}"),
                found: format!("format_version {}", header.format_version),
            });
        }
        let count = r.u32()? as usize;
        let blobs_start = r.pos;
        if bytes.len() < blobs_start + 32 {
            return Err(CheckpointError::Malformed("missing checksum".into()));
        }
        let blob_bytes = &bytes[blobs_start..bytes.len() - 32];
        if Sha256::digest(blob_bytes).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(CheckpointError::ChecksumFailure);
        }
        let mut r = Reader {
            bytes: blob_bytes,
            pos: 0,
        };
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("blob name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = match r.u8()? {
                DTYPE_F64 => r
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(CheckpointError::Malformed(format!("unknown dtype {other}"))),
            };
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            blobs.push((name, t));
        }
        if r.pos != blob_bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes after blobs".into()));
        }
        Ok(Self { header, blobs })
    }

    /// Copies blob values into `store`, matching by name and shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.blobs.len() != store.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} blobs for {} parameters",
                self.blobs.len(),
                store.len()
            )));
        }
        for (name, t) in &self.blobs {
            let id = store
                .find(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown parameter {name}")))?;
            let slot = store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Malformed("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
