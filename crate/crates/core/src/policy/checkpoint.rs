//! Versioned binary checkpoints.
//!
//! Layout: magic, format version (u32), JSON header length (u64) and bytes,
//! tensor count (u32), then per tensor its name, rank, dims and row-major
//! little-endian f64 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Vocabulary;
use crate::policy::net::NetShape;
use crate::policy::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"BLKSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Which parameter family the tensors belong to (`policy`, `q`, `planner`).
    pub kind: String,
    pub shape: NetShape,
    pub vocab: Vocabulary,
    /// Resolved configuration the checkpoint was trained with.
    pub config: serde_json::Value,
    /// Trainer progress (epochs done, optimizer step) for resuming.
    #[serde(default)]
    pub state: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params` under `prefix`.
    pub fn push_params<P: ParamSet>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.tensors() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Copies tensors stored under `prefix` into `params`, requiring every
    /// name and shape to match.
    pub fn load_params<P: ParamSet>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for (name, t) in params.tensors_mut() {
            let key = format!("{prefix}{name}");
            let stored = self
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, s)| s)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} overruns the file")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((
                name,
                Tensor::from_vec(&shape, data).expect("length checked"),
            ));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
