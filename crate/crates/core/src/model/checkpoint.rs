//! Tensor container used for model checkpoints and optimizer state.
//!
//! Layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `RLCK` |
//! | 4     | format version (u32) |
//! | 8     | header length `h` (u64) |
//! | h     | UTF-8 JSON header: metadata and tensor table |
//! | ...   | tensor payloads, f64 values, in table order |
//!
//! Each table entry holds `name`, `shape` and `offset` (element offset into
//! the payload). Values are stored as f64 so that a save/load cycle is exact
//! for both f32 and f64 models.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::VarStore;
use super::net::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
    /// Optimizer and resume state, not a model.
    TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: ModelConfig,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TableEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every variable of `vs` whose name passes `keep`.
    pub fn add_store(&mut self, vs: &VarStore, keep: impl Fn(&str) -> bool) -> Result<()> {
        for v in vs.all() {
            if keep(&v.name) {
                self.insert(&v.name, v.var.as_tensor())?;
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        self.tensors.insert(name.to_string(), (t.dims().to_vec(), data));
        Ok(())
    }

    pub fn tensor(&self, name: &str, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
        match self.tensors.get(name) {
            Some((shape, data)) => Ok(Some(Tensor::from_slice(data, shape.as_slice(), device)?.to_dtype(dtype)?)),
            None => Ok(None),
        }
    }

    /// Copies stored values into every variable of `vs` selected by
    /// `wanted`. A selected variable missing from the checkpoint is an error.
    pub fn load_into(&self, vs: &VarStore, wanted: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for v in vs.all() {
            if !wanted(&v.name) {
                continue;
            }
            let t = self
                .tensor(&v.name, vs.dtype(), vs.device())?
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", v.name)))?;
            if t.dims() != v.var.dims() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?} in the checkpoint, model expects {:?}",
                    v.name,
                    t.dims(),
                    v.var.dims()
                )));
            }
            v.var.set(&t)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut table = Vec::with_capacity(self.tensors.len());
        for (name, (shape, data)) in &self.tensors {
            table.push(TableEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: table,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = payload
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| bad(&format!("truncated tensor {}", e.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name, (e.shape, data));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames, so readers never observe a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
