//! Embedding index of reference tiles and exhaustive query localization.

mod index;

pub use index::{EmbeddingIndex, EmbeddingRecord, IndexMetadata, RecordView, INDEX_MAGIC, INDEX_VERSION};

use std::cmp::Ordering;
use std::path::Path;

use candle_core::DType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geodata::{read_tile_manifest, MissingTilePolicy, Point, ReferenceTile, TILE_MANIFEST};
use crate::image::{AnyImage, GrayImage};
use crate::model::{images_to_tensor, load_encoder, Checkpoint, Encoder, Stage};
use crate::preprocess::{AugmentConfig, Canny};
use crate::training::plain_input;

/// Similarity used for ranking. Cosine is the method; the dot product exists
/// only for the ablation without normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
}

/// Preprocessing applied identically to reference tiles and queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub size: usize,
    pub edges: bool,
    pub canny: Canny,
}

impl InputSpec {
    pub fn prepare(&self, image: &GrayImage) -> Result<GrayImage> {
        let mut cfg = AugmentConfig::identity(self.size);
        cfg.edges = self.edges;
        cfg.canny = self.canny;
        plain_input(image, &cfg)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A loaded encoder plus the hashes that tie indexes to it.
pub struct EmbeddingModel {
    encoder: Encoder,
    input: InputSpec,
    checkpoint_hash: String,
    config_hash: String,
}

impl EmbeddingModel {
    /// Accepts `finetuned` checkpoints, and `pretrained` ones for the ablation
    /// without fine-tuning.
    pub fn from_checkpoint(ckpt: &Checkpoint, input: InputSpec) -> Result<Self> {
        if ckpt.meta.stage == Stage::TrainState {
            return Err(Error::Config("cannot embed with a train-state file".into()));
        }
        if input.size != ckpt.meta.config.input_size {
            return Err(Error::Config(format!(
                "input size {} does not match the encoder's {}",
                input.size, ckpt.meta.config.input_size
            )));
        }
        let encoder = load_encoder(ckpt, DType::F32)?;
        let config_hash = sha256_hex(&serde_json::to_vec(&(&ckpt.meta.config, &input))?);
        Ok(Self {
            encoder,
            input,
            checkpoint_hash: sha256_hex(&ckpt.to_bytes()?),
            config_hash,
        })
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn dim(&self) -> usize {
        self.encoder.config().latent_dim
    }

    /// Global embeddings of raw images, preprocessed in parallel and encoded
    /// in fixed-size batches in input order.
    pub fn embed(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f32>>> {
        const BATCH: usize = 32;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(BATCH) {
            let prepared: Vec<GrayImage> = chunk.par_iter().map(|im| self.input.prepare(im)).collect::<Result<_>>()?;
            let refs: Vec<&GrayImage> = prepared.iter().collect();
            let x = images_to_tensor(&refs, DType::F32, &candle_core::Device::Cpu)?;
            let g = self.encoder.forward(&x, false)?.global_vec;
            out.extend(g.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    fn check(&self, index: &EmbeddingIndex) -> Result<()> {
        let m = index.metadata();
        if m.checkpoint_hash != self.checkpoint_hash || m.config_hash != self.config_hash {
            return Err(Error::Config(format!(
                "index was built with encoder {}.. / config {}.., the query encoder is {}.. / {}..; rebuild the index",
                &m.checkpoint_hash[..m.checkpoint_hash.len().min(12)],
                &m.config_hash[..m.config_hash.len().min(12)],
                &self.checkpoint_hash[..12],
                &self.config_hash[..12]
            )));
        }
        Ok(())
    }
}

/// Embeds every tile in order. Nothing is checked against the hashes here;
/// they are recorded for query time.
pub fn build_index(tiles: &[ReferenceTile], model: &EmbeddingModel, crs_id: &str) -> Result<EmbeddingIndex> {
    let grays: Vec<GrayImage> = tiles.par_iter().map(|t| t.image.to_gray()).collect();
    let refs: Vec<&GrayImage> = grays.iter().collect();
    let vectors = model.embed(&refs)?;
    let records = tiles
        .iter()
        .zip(vectors)
        .map(|(t, vector)| EmbeddingRecord {
            tile_id: t.tile_id,
            center: t.center,
            vector,
        })
        .collect();
    EmbeddingIndex::new(
        records,
        IndexMetadata {
            checkpoint_hash: model.checkpoint_hash.clone(),
            config_hash: model.config_hash.clone(),
            crs_id: crs_id.to_string(),
            created: None,
        },
    )
}

/// Reads a reference database for indexing. Unreadable tiles are skipped
/// with a warning or abort the load, per `policy`.
pub fn load_tile_db(db_dir: &Path, policy: MissingTilePolicy) -> Result<Vec<ReferenceTile>> {
    let records = read_tile_manifest(&db_dir.join(TILE_MANIFEST))?;
    let mut tiles = Vec::with_capacity(records.len());
    for r in records {
        match AnyImage::open(&db_dir.join(&r.file)) {
            Ok(image) => tiles.push(ReferenceTile {
                tile_id: r.tile_id,
                center: Point::new(r.center_e, r.center_n),
                heading: r.heading,
                footprint: r.footprint_m,
                image,
            }),
            Err(e) if policy == MissingTilePolicy::Skip => log::warn!("skipping tile {}: {e}", r.tile_id),
            Err(e) => return Err(e),
        }
    }
    Ok(tiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(tile_id, score)`, best first.
    pub ranked: Vec<(u64, f64)>,
    /// Center of the rank-1 tile; `None` when no candidate was scored.
    pub predicted_location: Option<Point>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Cosine similarity in f64, clamped to `[-1, 1]`; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        return 0.0;
    }
    (dot(a, b) / n).clamp(-1.0, 1.0)
}

/// Exhaustive ranking of the records that pass `keep`. Scores are sorted
/// descending with ties broken by ascending tile id.
pub fn rank_filtered(
    query_id: &str,
    query: &[f32],
    index: &EmbeddingIndex,
    top_k: usize,
    metric: Metric,
    keep: impl Fn(&RecordView) -> bool + Sync,
) -> Result<RetrievalResult> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be >= 1"));
    }
    if query.len() != index.dim() {
        return Err(Error::invalid(format!(
            "query has {} dims, index has {}",
            query.len(),
            index.dim()
        )));
    }
    if !query.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("query {query_id} embedding is not finite")));
    }
    let qn = norm(query);
    let mut scored: Vec<(u64, f64, usize)> = (0..index.len())
        .into_par_iter()
        .filter_map(|i| {
            let r = index.record(i);
            if !keep(&r) {
                return None;
            }
            let s = match metric {
                Metric::Dot => dot(query, r.vector),
                Metric::Cosine => {
                    let n = qn * index.norm(i);
                    if n == 0.0 {
                        0.0
                    } else {
                        (dot(query, r.vector) / n).clamp(-1.0, 1.0)
                    }
                }
            };
            Some((r.tile_id, s, i))
        })
        .collect();
    let cmp = |a: &(u64, f64, usize), b: &(u64, f64, usize)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
    if scored.len() > top_k {
        scored.select_nth_unstable_by(top_k - 1, cmp);
        scored.truncate(top_k);
    }
    scored.sort_by(cmp);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        predicted_location: scored.first().map(|s| index.record(s.2).center),
        ranked: scored.into_iter().map(|(id, s, _)| (id, s)).collect(),
    })
}

/// Ranks a precomputed query embedding against the whole index.
pub fn rank(query_id: &str, query: &[f32], index: &EmbeddingIndex, top_k: usize, metric: Metric) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(Error::invalid("index is empty"));
    }
    rank_filtered(query_id, query, index, top_k, metric, |_| true)
}

/// Encodes one query image with the index's encoder and ranks it.
pub fn localize(
    query_id: &str,
    query: &GrayImage,
    index: &EmbeddingIndex,
    model: &EmbeddingModel,
    top_k: usize,
    metric: Metric,
) -> Result<RetrievalResult> {
    Ok(localize_all(&[(query_id, query)], index, model, top_k, metric)?.remove(0))
}

/// Batched form of [`localize`]; results follow input order.
pub fn localize_all(
    queries: &[(&str, &GrayImage)],
    index: &EmbeddingIndex,
    model: &EmbeddingModel,
    top_k: usize,
    metric: Metric,
) -> Result<Vec<RetrievalResult>> {
    model.check(index)?;
    if index.is_empty() {
        return Err(Error::invalid("index is empty"));
    }
    let images: Vec<&GrayImage> = queries.iter().map(|q| q.1).collect();
    let vectors = model.embed(&images)?;
    queries
        .iter()
        .zip(&vectors)
        .map(|((id, _), v)| rank(id, v, index, top_k, metric))
        .collect()
}

/// UAV-side images to be localized. Deliberately unrelated to
/// [`ReferenceTileSet`](crate::training::ReferenceTileSet): training never
/// accepts a query set.
#[derive(Debug, Clone)]
pub struct QuerySet {
    queries: Vec<(String, GrayImage)>,
}

impl QuerySet {
    pub fn new(queries: Vec<(String, GrayImage)>) -> Self {
        Self { queries }
    }

    /// Every `*.png` in `dir`, sorted by file name; the id is the file stem.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let queries = paths
            .par_iter()
            .map(|p| {
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                Ok((id, AnyImage::open(p)?.to_gray()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GrayImage)> {
        self.queries.iter().map(|(id, im)| (id.as_str(), im))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    query_id: String,
    rank: usize,
    tile_id: u64,
    score: f64,
    pred_e: f64,
    pred_n: f64,
}

/// One row per (query, rank). A query with no candidates gets no rows.
pub fn write_results_csv(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        let p = r.predicted_location.unwrap_or(Point::new(f64::NAN, f64::NAN));
        for (i, &(tile_id, score)) in r.ranked.iter().enumerate() {
            w.serialize(ResultRow {
                query_id: r.query_id.clone(),
                rank: i + 1,
                tile_id,
                score,
                pred_e: p.e,
                pred_n: p.n,
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::model::write_atomic(path, &bytes)
}

/// Inverse of [`write_results_csv`]; queries keep first-appearance order.
pub fn read_results_csv(path: &Path) -> Result<Vec<RetrievalResult>> {
    let mut out: Vec<RetrievalResult> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: ResultRow = row?;
        if out.last().is_none_or(|r| r.query_id != row.query_id) {
            out.push(RetrievalResult {
                query_id: row.query_id.clone(),
                ranked: Vec::new(),
                predicted_location: Some(Point::new(row.pred_e, row.pred_n)),
            });
        }
        let r = out.last_mut().expect("pushed");
        if row.rank != r.ranked.len() + 1 {
            return Err(Error::format(path, format!("query {} has rank {} out of order", row.query_id, row.rank)));
        }
        r.ranked.push((row.tile_id, row.score));
    }
    Ok(out)
}
