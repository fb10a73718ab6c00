//! The ablation matrix: every variant trained and scored under each seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use log::info;
use refloc::eval::{evaluate, QueryGroundTruth, RecallCell};
use refloc::geodata::ReferenceTile;
use refloc::image::GrayImage;
use refloc::model::Checkpoint;
use refloc::retrieval::{build_index, localize_all, EmbeddingModel, Metric, QuerySet};
use refloc::training::{finetune_encoder, pretrain_autoencoder, ReferenceTileSet, RunOptions};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Variant};
use crate::manifest::sha256_hex;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub recall: Vec<RecallCell>,
}

impl AblationRow {
    pub fn recall(&self, k: usize, d: f64) -> Option<f64> {
        self.recall.iter().find(|c| c.k == k && c.d == d).map(|c| c.recall)
    }
}

/// `base` with the switches of `variant` and the training seed applied.
pub fn variant_config(base: &PipelineConfig, variant: Variant, seed: u64) -> PipelineConfig {
    let mut c = base.clone();
    c.train.seed = seed;
    match variant {
        Variant::Full => {}
        Variant::NoVicregl => c.train.flags.use_vicregl = false,
        Variant::NoPerceptual => c.train.flags.use_perceptual = false,
        Variant::NoEdges => c.train.flags.use_edges = false,
        Variant::NoCosine => c.retrieval.metric = Metric::Dot,
    }
    c
}

/// Trains and scores each variant under each configured seed. Checkpoints
/// are cached under `cache_dir` by a hash of the tiles and the training
/// configuration, so variants that share a stage (the pretrained model, or
/// the full and dot-product runs) train it once.
pub fn run_ablation(
    tiles: &[ReferenceTile],
    queries: &QuerySet,
    truth: &[QueryGroundTruth],
    base: &PipelineConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let data_key = tiles_hash(tiles);
    let set = ReferenceTileSet::from_tiles(tiles, None)?;
    let q: Vec<(&str, &GrayImage)> = queries.iter().collect();
    let mut cache = Cache::new(cache_dir)?;
    let mut rows = Vec::new();
    for &seed in &base.ablate.seeds {
        for &variant in &base.ablate.variants {
            let c = variant_config(base, variant, seed);
            let pre_config = c.pretrain_config();
            let pre_key = sha256_hex(&serde_json::to_vec(&(&data_key, "pretrain", &pre_config))?);
            let pre = cache.get_or(&pre_key, || {
                info!("ablate: pretraining for {} seed {seed}", variant.name());
                Ok(pretrain_autoencoder(&set, &pre_config, &RunOptions::default())?.checkpoint)
            })?;
            let ft_config = c.finetune_config();
            let ft_key = sha256_hex(&serde_json::to_vec(&(&pre_key, "finetune", &ft_config))?);
            let ft = cache.get_or(&ft_key, || {
                info!("ablate: fine-tuning for {} seed {seed}", variant.name());
                Ok(finetune_encoder(&set, &pre, &ft_config, &RunOptions::default())?.checkpoint)
            })?;

            let model = EmbeddingModel::from_checkpoint(&ft, c.input_spec())?;
            let index = build_index(tiles, &model, "ablation")?;
            let results = localize_all(&q, &index, &model, c.retrieval.top_k, c.retrieval.metric)?;
            let report = evaluate(&results, truth, &index, &c.eval.report)?;
            for cell in &report.recall {
                info!("ablate: {} seed {seed} R@{}@{} m = {:.2}", variant.name(), cell.k, cell.d, cell.recall);
            }
            rows.push(AblationRow {
                variant,
                seed,
                recall: report.recall,
            });
        }
    }
    Ok(rows)
}

fn tiles_hash(tiles: &[ReferenceTile]) -> String {
    let mut bytes = Vec::new();
    for t in tiles {
        bytes.extend(t.tile_id.to_le_bytes());
        bytes.extend(t.center.e.to_le_bytes());
        bytes.extend(t.center.n.to_le_bytes());
        bytes.extend(t.heading.to_le_bytes());
        bytes.extend(t.footprint.to_le_bytes());
        for v in t.image.to_gray().data() {
            bytes.extend(v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

struct Cache {
    dir: Option<PathBuf>,
    memory: BTreeMap<String, Checkpoint>,
}

impl Cache {
    fn new(dir: Option<&Path>) -> Result<Self> {
        let dir = dir.map(|d| d.join("checkpoints"));
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self {
            dir,
            memory: BTreeMap::new(),
        })
    }

    fn get_or(&mut self, key: &str, train: impl FnOnce() -> Result<Checkpoint>) -> Result<Checkpoint> {
        if let Some(c) = self.memory.get(key) {
            return Ok(c.clone());
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("{}.ckpt", &key[..16])));
        let ckpt = match &file {
            Some(f) if f.exists() => Checkpoint::load(f)?,
            _ => {
                let c = train()?;
                if let Some(f) = &file {
                    c.save(f)?;
                }
                c
            }
        };
        self.memory.insert(key.to_string(), ckpt.clone());
        Ok(ckpt)
    }
}

/// Median over seeds of each variant's recall cells, in variant order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(Variant, Vec<RecallCell>)> {
    let mut by_variant: BTreeMap<Variant, Vec<&AblationRow>> = BTreeMap::new();
    for r in rows {
        by_variant.entry(r.variant).or_default().push(r);
    }
    by_variant
        .into_iter()
        .map(|(variant, runs)| {
            let cells = runs[0]
                .recall
                .iter()
                .map(|cell| {
                    let values: Vec<f64> = runs.iter().filter_map(|r| r.recall(cell.k, cell.d)).collect();
                    RecallCell {
                        k: cell.k,
                        d: cell.d,
                        recall: median(&values),
                    }
                })
                .collect();
            (variant, cells)
        })
        .collect()
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Writes the per-seed table and the per-variant medians.
pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(ABLATION_CSV))?;
    writeln!(f, "variant,seed,k,d,recall")?;
    for r in rows {
        for c in &r.recall {
            writeln!(f, "{},{},{},{},{:.4}", r.variant.name(), r.seed, c.k, c.d, c.recall)?;
        }
    }
    let mut f = fs::File::create(dir.join(SUMMARY_CSV))?;
    writeln!(f, "variant,k,d,median_recall")?;
    for (variant, cells) in summarize(rows) {
        for c in cells {
            writeln!(f, "{},{},{},{:.4}", variant.name(), c.k, c.d, c.recall)?;
        }
    }
    Ok(())
}
