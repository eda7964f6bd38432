//! Checkpoint serialization: JSON header plus raw little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TBRF\x00\x01\x00\x00";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic): {0}")]
    BadMagic(String),
    #[error("corrupt checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint payload truncated: expected {expected} f64 values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage_count: usize,
    #[serde(default)]
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A named-tensor container with free-form JSON metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub stage_count: usize,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(stage_count: usize) -> Self {
        Self {
            stage_count,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut offset = 0usize;
        let entries: Vec<EntryHeader> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = EntryHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            stage_count: self.stage_count,
            meta: self.meta.clone(),
            entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_bytes).map_err(io_err)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(path.display().to_string()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io_err)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header_bytes).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }

        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io_err)?;
        let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() < total * 8 {
            return Err(CheckpointError::Truncated {
                expected: total,
                found: payload.len() / 8,
            });
        }
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let numel: usize = e.shape.iter().product();
            let data: Vec<f64> = payload[e.offset * 8..(e.offset + numel) * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((
                e.name.clone(),
                Tensor::new(e.shape.clone(), data)
                    .map_err(|e| CheckpointError::BadHeader(e.to_string()))?,
            ));
        }
        Ok(Self {
            stage_count: header.stage_count,
            meta: header.meta,
            tensors,
        })
    }
}
