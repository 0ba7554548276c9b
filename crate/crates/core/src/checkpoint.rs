//! Versioned checkpoint container.
//!
//! Layout: magic `GANOCKPT`, `u32` version, `u64` header length, a JSON header
//! (run config, epoch, step, tensor names and shapes), then every parameter
//! followed by every momentum buffer as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"GANOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
    /// Momentum buffers aligned with `params`; empty when not saved.
    pub velocity: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    step: usize,
    tensors: Vec<(String, Vec<usize>)>,
    velocity: bool,
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, epoch: usize, step: usize, store: &ParamStore, velocity: &[Tensor]) -> Self {
        Self {
            config: config.clone(),
            epoch,
            step,
            params: store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect(),
            velocity: velocity.to_vec(),
        }
    }

    /// Copies parameters into a store with the same names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            tensors: self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            velocity: !self.velocity.is_empty(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.iter().map(|(_, t)| t).chain(&self.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut cursor = 20 + len;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| Error::Checkpoint("truncated tensor data".into()))?;
            cursor += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::new(shape.to_vec(), data))
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for (name, shape) in &header.tensors {
            params.push((name.clone(), take(shape)?));
        }
        let mut velocity = Vec::new();
        if header.velocity {
            for (_, shape) in &header.tensors {
                velocity.push(take(shape)?);
            }
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
