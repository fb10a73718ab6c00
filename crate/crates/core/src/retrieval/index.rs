//! On-disk layout, all integers and floats little-endian:
//!
//! ```text
//! b"RLIX" | u32 version | u64 header_len | header (JSON)
//! f32 matrix, count x dim, row-major
//! count x (u64 tile_id, f64 center_e, f64 center_n)
//! ```
//!
//! The JSON header holds `count`, `dim` and the [`IndexMetadata`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::Point;

pub const INDEX_MAGIC: &[u8; 4] = b"RLIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexMetadata {
    /// SHA-256 of the encoder checkpoint file contents.
    pub checkpoint_hash: String,
    /// SHA-256 of the model configuration and input preprocessing.
    pub config_hash: String,
    pub crs_id: String,
    /// Creation time, left empty by default so rebuilds are byte-identical.
    #[serde(default)]
    pub created: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub tile_id: u64,
    pub center: Point,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct RecordView<'a> {
    pub tile_id: u64,
    pub center: Point,
    pub vector: &'a [f32],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    count: usize,
    dim: usize,
    metadata: IndexMetadata,
}

/// Immutable after construction; safe to share across query threads.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    metadata: IndexMetadata,
    dim: usize,
    ids: Vec<u64>,
    centers: Vec<Point>,
    data: Vec<f32>,
    norms: Vec<f64>,
    rows: HashMap<u64, usize>,
}

impl EmbeddingIndex {
    pub fn new(records: Vec<EmbeddingRecord>, metadata: IndexMetadata) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        let mut ids = Vec::with_capacity(records.len());
        let mut centers = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in records {
            if r.vector.len() != dim {
                return Err(Error::invalid(format!(
                    "tile {} has {} dims, expected {dim}",
                    r.tile_id,
                    r.vector.len()
                )));
            }
            if !r.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("tile {} embedding is not finite", r.tile_id)));
            }
            ids.push(r.tile_id);
            centers.push(r.center);
            data.extend_from_slice(&r.vector);
        }
        Self::assemble(metadata, dim, ids, centers, data)
    }

    fn assemble(metadata: IndexMetadata, dim: usize, ids: Vec<u64>, centers: Vec<Point>, data: Vec<f32>) -> Result<Self> {
        let mut rows = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if rows.insert(id, i).is_some() {
                return Err(Error::invalid(format!("duplicate tile id {id}")));
            }
        }
        let norms = if dim == 0 {
            vec![0.0; ids.len()]
        } else {
            data.chunks(dim)
                .map(|v| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
                .collect()
        };
        Ok(Self {
            metadata,
            dim,
            ids,
            centers,
            data,
            norms,
            rows,
        })
    }

    pub fn metadata(&self) -> &IndexMetadata {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn record(&self, i: usize) -> RecordView<'_> {
        RecordView {
            tile_id: self.ids[i],
            center: self.centers[i],
            vector: &self.data[i * self.dim..(i + 1) * self.dim],
        }
    }

    pub(crate) fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn records(&self) -> impl Iterator<Item = RecordView<'_>> {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn center_of(&self, tile_id: u64) -> Option<Point> {
        self.rows.get(&tile_id).map(|&i| self.centers[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            count: self.len(),
            dim: self.dim,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + self.data.len() * 4 + self.len() * 24);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (id, c) in self.ids.iter().zip(&self.centers) {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&c.e.to_le_bytes());
            out.extend_from_slice(&c.n.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason.to_string());
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated index file"));
        if take(0, 4)? != INDEX_MAGIC {
            return Err(bad("not an embedding index (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported index version {version}")));
        }
        let hlen = u64::from_le_bytes(take(8, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(16, hlen)?).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut at = 16 + hlen;
        let n = header.count * header.dim;
        let data: Vec<f32> = take(at, n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += n * 4;
        let table = take(at, header.count * 24)?;
        if at + header.count * 24 != bytes.len() {
            return Err(bad("trailing bytes after the tile table"));
        }
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
        let mut ids = Vec::with_capacity(header.count);
        let mut centers = Vec::with_capacity(header.count);
        for row in table.chunks_exact(24) {
            ids.push(u64::from_le_bytes(row[..8].try_into().expect("8 bytes")));
            centers.push(Point::new(f(&row[8..16]), f(&row[16..24])));
        }
        Self::assemble(header.metadata, header.dim, ids, centers, data)
    }

    /// Written atomically through a temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}
