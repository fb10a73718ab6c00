//! Pipeline stages over a workdir. Each stage checks its prerequisites,
//! skips itself when its fingerprint and outputs are unchanged, and records
//! input and output hashes in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;
use refloc::eval::{
    emit_report, evaluate, perturbation_sweep, read_truth_csv, restricted_radius_eval,
};
use refloc::geodata::{
    build_reference_db, read_trajectory_csv, write_tile_db, RasterSource, ReferenceDbParams, ReferenceTile,
};
use refloc::image::GrayImage;
use refloc::model::Checkpoint;
use refloc::retrieval::{
    build_index, load_tile_db, localize_all, read_results_csv, write_results_csv, EmbeddingIndex, EmbeddingModel,
    QuerySet,
};
use refloc::synth::{
    generate_synthetic_corpus, SynthConfig, QUERY_DIR, RASTER_FILE, SYNTH_CONFIG_FILE, TRAJECTORY_FILE, TRUTH_FILE,
};
use refloc::training::{finetune_encoder, pretrain_autoencoder, ReferenceTileSet, RunOptions};
use refloc::Error;
use serde::{Deserialize, Serialize};

use crate::ablate::{run_ablation, write_ablation, ABLATION_CSV};
use crate::config::{EncoderChoice, PipelineConfig};
use crate::manifest::{display_key, hash_path, sha256_hex, Manifest, StageRecord, WorkdirLock};

pub const SYNTH_DIR: &str = "synth";
pub const REFDB_DIR: &str = "refdb";
pub const CRS_FILE: &str = "crs.json";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";
pub const INDEX_FILE: &str = "index.bin";
pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_DIR: &str = "report";
pub const ABLATE_DIR: &str = "ablate";
pub const LOG_DIR: &str = "logs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    BuildRefdb,
    Pretrain,
    Finetune,
    Index,
    Localize,
    Evaluate,
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildRefdb => "build-refdb",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Index => "index",
            Stage::Localize => "localize",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Ran { seconds: f64 },
    UpToDate,
}

#[derive(Serialize, Deserialize)]
struct CrsRecord {
    crs_id: String,
}

/// What a stage reads, under which settings, and what it writes.
struct Plan {
    inputs: Vec<PathBuf>,
    config: serde_json::Value,
    outputs: Vec<PathBuf>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    /// Run even when the manifest says the stage is up to date.
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config, force: false }
    }

    pub fn workdir(&self) -> &Path {
        &self.config.paths.workdir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.workdir().join(rel)
    }

    fn synth_or(&self, configured: &Option<PathBuf>, rel: &str) -> PathBuf {
        configured.clone().unwrap_or_else(|| self.path(SYNTH_DIR).join(rel))
    }

    pub fn raster_path(&self) -> PathBuf {
        self.synth_or(&self.config.paths.raster, RASTER_FILE)
    }

    pub fn trajectory_path(&self) -> PathBuf {
        self.synth_or(&self.config.paths.trajectory, TRAJECTORY_FILE)
    }

    pub fn queries_dir(&self) -> PathBuf {
        self.synth_or(&self.config.paths.queries, QUERY_DIR)
    }

    pub fn truth_path(&self) -> PathBuf {
        self.synth_or(&self.config.paths.truth, TRUTH_FILE)
    }

    /// Tiling settings. On the synthetic corpus these come from the
    /// generator's own record so the database matches its query footprint.
    pub fn refdb_params(&self) -> Result<ReferenceDbParams> {
        if self.config.paths.raster.is_some() {
            return Ok(self.config.geodata.params());
        }
        let path = self.path(SYNTH_DIR).join(SYNTH_CONFIG_FILE);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let synth: SynthConfig = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        Ok(ReferenceDbParams {
            on_missing: self.config.geodata.on_missing,
            ..synth.db_params()
        })
    }

    fn encoder_file(&self) -> (&'static str, Stage) {
        match self.config.retrieval.encoder {
            EncoderChoice::Finetuned => (FINETUNED_FILE, Stage::Finetune),
            EncoderChoice::Pretrained => (PRETRAINED_FILE, Stage::Pretrain),
        }
    }

    /// An input file the user supplies, or that `synth` writes when unset.
    fn external(&self, stage: Stage, path: PathBuf, configured: bool, what: &str) -> Result<PathBuf> {
        if path.exists() {
            return Ok(path);
        }
        if configured {
            anyhow::bail!("{what} not found at {}", path.display());
        }
        Err(Error::MissingPrerequisite {
            stage: stage.name().into(),
            requires: Stage::Synth.name().into(),
            detail: format!("no {what} configured and none at {}", path.display()),
        }
        .into())
    }

    /// Output of an earlier stage that must have completed in this workdir.
    fn produced(&self, manifest: &Manifest, stage: Stage, by: Stage, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if !manifest.stages.contains_key(by.name()) || !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: stage.name().into(),
                requires: by.name().into(),
                detail: format!("{} is missing", path.display()),
            }
            .into());
        }
        Ok(path)
    }

    fn plan(&self, stage: Stage, manifest: &Manifest) -> Result<Plan> {
        let c = &self.config;
        let p = &c.paths;
        let json = |v: &dyn erased::Json| v.to_json();
        Ok(match stage {
            Stage::Synth => Plan {
                inputs: vec![],
                config: json(&c.synth),
                outputs: vec![self.path(SYNTH_DIR)],
            },
            Stage::BuildRefdb => {
                let mut inputs = vec![
                    self.external(stage, self.raster_path(), p.raster.is_some(), "raster")?,
                    self.external(stage, self.trajectory_path(), p.trajectory.is_some(), "trajectory")?,
                ];
                if p.raster.is_none() {
                    inputs.push(self.path(SYNTH_DIR).join(SYNTH_CONFIG_FILE));
                }
                Plan {
                    inputs,
                    config: json(&(self.refdb_params()?, c.geodata.store_px)),
                    outputs: vec![self.path(REFDB_DIR)],
                }
            }
            Stage::Pretrain => Plan {
                inputs: vec![self.produced(manifest, stage, Stage::BuildRefdb, REFDB_DIR)?],
                config: json(&c.pretrain_config()),
                outputs: vec![self.path(PRETRAINED_FILE)],
            },
            Stage::Finetune => Plan {
                inputs: vec![
                    self.produced(manifest, stage, Stage::BuildRefdb, REFDB_DIR)?,
                    self.produced(manifest, stage, Stage::Pretrain, PRETRAINED_FILE)?,
                ],
                config: json(&c.finetune_config()),
                outputs: vec![self.path(FINETUNED_FILE)],
            },
            Stage::Index => {
                let (file, by) = self.encoder_file();
                Plan {
                    inputs: vec![
                        self.produced(manifest, stage, Stage::BuildRefdb, REFDB_DIR)?,
                        self.produced(manifest, stage, by, file)?,
                    ],
                    config: json(&(c.input_spec(), c.geodata.on_missing)),
                    outputs: vec![self.path(INDEX_FILE)],
                }
            }
            Stage::Localize => {
                let (file, by) = self.encoder_file();
                Plan {
                    inputs: vec![
                        self.produced(manifest, stage, Stage::Index, INDEX_FILE)?,
                        self.produced(manifest, stage, by, file)?,
                        self.external(stage, self.queries_dir(), p.queries.is_some(), "query directory")?,
                    ],
                    config: json(&(c.input_spec(), c.retrieval)),
                    outputs: vec![self.path(RESULTS_FILE)],
                }
            }
            Stage::Evaluate => {
                let mut inputs = vec![
                    self.produced(manifest, stage, Stage::Localize, RESULTS_FILE)?,
                    self.produced(manifest, stage, Stage::Index, INDEX_FILE)?,
                    self.external(stage, self.truth_path(), p.truth.is_some(), "ground-truth CSV")?,
                ];
                if self.needs_query_embeddings() {
                    let (file, by) = self.encoder_file();
                    inputs.push(self.produced(manifest, stage, by, file)?);
                    inputs.push(self.external(stage, self.queries_dir(), p.queries.is_some(), "query directory")?);
                    inputs.push(self.produced(manifest, stage, Stage::BuildRefdb, REFDB_DIR)?);
                }
                Plan {
                    inputs,
                    config: json(&(&c.eval, c.input_spec(), c.retrieval)),
                    outputs: vec![self.path(REPORT_DIR)],
                }
            }
            Stage::Ablate => Plan {
                inputs: vec![
                    self.produced(manifest, stage, Stage::BuildRefdb, REFDB_DIR)?,
                    self.external(stage, self.queries_dir(), p.queries.is_some(), "query directory")?,
                    self.external(stage, self.truth_path(), p.truth.is_some(), "ground-truth CSV")?,
                ],
                config: json(&(&c.ablate, &c.train, &c.finetune, &c.eval.report, c.retrieval.top_k)),
                outputs: vec![self.path(ABLATE_DIR).join(ABLATION_CSV)],
            },
        })
    }

    fn needs_query_embeddings(&self) -> bool {
        self.config.eval.restricted_radius.is_some() || !self.config.eval.sweep.perturbations.is_empty()
    }

    /// Runs one stage under the workdir lock.
    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        let workdir = self.workdir();
        let _lock = WorkdirLock::acquire(workdir)?;
        let mut manifest = Manifest::load(workdir)?;
        let plan = self.plan(stage, &manifest)?;

        let mut inputs = BTreeMap::new();
        for p in &plan.inputs {
            inputs.insert(display_key(workdir, p), hash_path(p)?);
        }
        let config_hash = sha256_hex(&serde_json::to_vec(&plan.config)?);
        let fingerprint = sha256_hex(&serde_json::to_vec(&(stage.name(), &config_hash, &inputs))?);
        if !self.force && manifest.is_current(workdir, stage.name(), &fingerprint)? {
            info!("{}: up to date", stage.name());
            return Ok(Outcome::UpToDate);
        }

        let start = Instant::now();
        info!("{}: running", stage.name());
        self.execute(stage)?;
        let seconds = start.elapsed().as_secs_f64();

        let mut outputs = BTreeMap::new();
        for p in &plan.outputs {
            outputs.insert(display_key(workdir, p), hash_path(p)?);
        }
        manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                fingerprint,
                config_hash,
                inputs,
                outputs,
                wall_seconds: seconds,
            },
        );
        manifest.save(workdir)?;
        info!("{}: done in {seconds:.1} s", stage.name());
        Ok(Outcome::Ran { seconds })
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        let c = &self.config;
        match stage {
            Stage::Synth => {
                let dir = self.path(SYNTH_DIR);
                remove_if_exists(&dir)?;
                let corpus = generate_synthetic_corpus(&c.synth)?;
                corpus.write(&dir)?;
                info!(
                    "synth: {} x {} px raster, {} poses, {} queries",
                    corpus.raster.width(),
                    corpus.raster.height(),
                    corpus.trajectory.poses().len(),
                    corpus.queries.len()
                );
            }
            Stage::BuildRefdb => {
                let (raster, sidecar) = RasterSource::open(&self.raster_path())?;
                let trajectory = read_trajectory_csv(&self.trajectory_path(), &sidecar.crs_id)?;
                let tiles = build_reference_db(&raster, &trajectory, &self.refdb_params()?)?;
                let dir = self.path(REFDB_DIR);
                remove_if_exists(&dir)?;
                write_tile_db(&dir, &tiles, c.geodata.store_px)?;
                fs::write(
                    dir.join(CRS_FILE),
                    serde_json::to_vec(&CrsRecord {
                        crs_id: sidecar.crs_id.clone(),
                    })?,
                )?;
                info!("build-refdb: {} tiles", tiles.len());
            }
            Stage::Pretrain => {
                let tiles = ReferenceTileSet::load(&self.path(REFDB_DIR), None)?;
                let opts = self.run_options("pretrain", PRETRAINED_FILE);
                let out = pretrain_autoencoder(&tiles, &c.pretrain_config(), &opts)?;
                out.checkpoint.save(&self.path(PRETRAINED_FILE))?;
                remove_if_exists(opts.state_path.as_ref().expect("set"))?;
            }
            Stage::Finetune => {
                let tiles = ReferenceTileSet::load(&self.path(REFDB_DIR), None)?;
                let pre = Checkpoint::load(&self.path(PRETRAINED_FILE))?;
                let opts = self.run_options("finetune", FINETUNED_FILE);
                let out = finetune_encoder(&tiles, &pre, &c.finetune_config(), &opts)?;
                out.checkpoint.save(&self.path(FINETUNED_FILE))?;
                remove_if_exists(opts.state_path.as_ref().expect("set"))?;
            }
            Stage::Index => {
                let tiles = self.tiles()?;
                let model = self.model()?;
                let index = build_index(&tiles, &model, &self.crs_id()?)?;
                index.save(&self.path(INDEX_FILE))?;
                info!("index: {} records of dim {}", index.len(), index.dim());
            }
            Stage::Localize => {
                let index = EmbeddingIndex::load(&self.path(INDEX_FILE))?;
                let model = self.model()?;
                let queries = QuerySet::load(&self.queries_dir())?;
                let q: Vec<(&str, &GrayImage)> = queries.iter().collect();
                let results = localize_all(&q, &index, &model, c.retrieval.top_k, c.retrieval.metric)?;
                write_results_csv(&self.path(RESULTS_FILE), &results)?;
                info!("localize: {} queries", results.len());
            }
            Stage::Evaluate => self.evaluate()?,
            Stage::Ablate => {
                let tiles = self.tiles()?;
                let queries = QuerySet::load(&self.queries_dir())?;
                let truth = read_truth_csv(&self.truth_path())?;
                let rows = run_ablation(&tiles, &queries, &truth, c, Some(&self.path(ABLATE_DIR)))?;
                write_ablation(&self.path(ABLATE_DIR), &rows)?;
            }
        }
        Ok(())
    }

    fn run_options(&self, name: &str, checkpoint: &str) -> RunOptions {
        RunOptions {
            log_path: Some(self.path(LOG_DIR).join(format!("{name}.jsonl"))),
            state_path: Some(self.path(format!("{name}.state").as_str())),
            checkpoint_path: Some(self.path(checkpoint)),
            stop_after: None,
        }
    }

    fn tiles(&self) -> Result<Vec<ReferenceTile>> {
        Ok(load_tile_db(&self.path(REFDB_DIR), self.config.geodata.on_missing)?)
    }

    fn crs_id(&self) -> Result<String> {
        let bytes = fs::read(self.path(REFDB_DIR).join(CRS_FILE))?;
        Ok(serde_json::from_slice::<CrsRecord>(&bytes)?.crs_id)
    }

    fn model(&self) -> Result<EmbeddingModel> {
        let (file, _) = self.encoder_file();
        let ckpt = Checkpoint::load(&self.path(file))?;
        Ok(EmbeddingModel::from_checkpoint(&ckpt, self.config.input_spec())?)
    }

    fn evaluate(&self) -> Result<()> {
        let c = &self.config;
        let results = read_results_csv(&self.path(RESULTS_FILE))?;
        let truth = read_truth_csv(&self.truth_path())?;
        let index = EmbeddingIndex::load(&self.path(INDEX_FILE))?;
        let mut report = evaluate(&results, &truth, &index, &c.eval.report)?;
        let out = self.path(REPORT_DIR);
        remove_if_exists(&out)?;

        if self.needs_query_embeddings() {
            let model = self.model()?;
            let embedded = embed_queries(&model, &QuerySet::load(&self.queries_dir())?)?;
            if let Some(radius) = c.eval.restricted_radius {
                let (_, restricted) =
                    restricted_radius_eval(&embedded, &truth, &index, radius, c.retrieval.metric, &c.eval.report)?;
                emit_report(&restricted, &out.join("restricted"))?;
            }
            if !c.eval.sweep.perturbations.is_empty() {
                let tiles = self.tiles()?;
                for &kind in &c.eval.sweep.perturbations {
                    report.sweeps.extend(perturbation_sweep(
                        &tiles,
                        &model,
                        &embedded,
                        &truth,
                        kind,
                        &kind.default_levels(),
                        c.eval.sweep.runs,
                        c.sweep_threshold(),
                        c.eval.sweep.seed,
                    )?);
                }
            }
        }
        emit_report(&report, &out)?;
        for cell in &report.recall {
            info!("R@{} within {} m: {:.2}", cell.k, cell.d, cell.recall);
        }
        Ok(())
    }
}

pub fn embed_queries(model: &EmbeddingModel, queries: &QuerySet) -> Result<Vec<(String, Vec<f32>)>> {
    let images: Vec<&GrayImage> = queries.iter().map(|q| q.1).collect();
    let vectors = model.embed(&images)?;
    Ok(queries.iter().map(|q| q.0.to_string()).zip(vectors).collect())
}

fn remove_if_exists(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).with_context(|| format!("removing {}", path.display()))?;
    } else if path.exists() {
        fs::remove_file(path).with_context(|| format!("removing {}", path.display()))?;
    }
    Ok(())
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> serde_json::Value;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("configuration serializes")
        }
    }
}
