//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config echo, training state, tensor index), then every tensor as
//! little-endian `f64` in index order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::param_specs;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DKSEGCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Velocity,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    group: Group,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    next_epoch: usize,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// First epoch a resumed run should execute.
    pub next_epoch: usize,
    pub params: ParamStore,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore) -> Self {
        Self { model, train: None, next_epoch: 0, params, velocity: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor> = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push(Entry { name: name.clone(), shape: t.shape().to_vec(), group: Group::Param });
            blobs.push(t);
        }
        for (name, t) in &self.velocity {
            tensors.push(Entry { name: name.clone(), shape: t.shape().to_vec(), group: Group::Velocity });
            blobs.push(t);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            next_epoch: self.next_epoch,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * blobs.iter().map(|t| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse and check the container against the shapes its own config
    /// implies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format_version != version {
            return Err(bad("header and container versions disagree"));
        }
        let mut cursor = &bytes[20 + hlen..];
        let mut params = ParamStore::default();
        let mut velocity = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut buf = [0u8; 8];
                cursor.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Tensor::new(&e.shape, data)?;
            match e.group {
                Group::Param => params.insert(e.name, t),
                Group::Velocity => {
                    velocity.insert(e.name, t);
                }
            }
        }
        if !cursor.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let ck = Self { model: header.model, train: header.train, next_epoch: header.next_epoch, params, velocity };
        ck.check_against(&ck.model)?;
        Ok(ck)
    }

    /// Error listing every parameter whose presence or shape differs from
    /// what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let diff = self.params.shape_diff(&param_specs(cfg));
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("incompatible parameters: {}", diff.join("; "))))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
