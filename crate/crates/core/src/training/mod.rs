//! Autoencoder pretraining and VICRegL fine-tuning.
//!
//! Both loops are deterministic under a fixed seed: the epoch order and every
//! augmentation draw are pure functions of `(seed, epoch, index)`, and views
//! are prepared in parallel but consumed in index order. A run can resume
//! from its train-state file, which holds the weights (including heads and
//! batch-norm statistics), the AdamW moments and the epoch counter.

mod data;
mod optim;

pub use data::{epoch_batches, epoch_order, item_seed, ReferenceTileSet, TrainTile};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::{
    autoencoder_loss, mean_feature_std, vicregl_total, BranchOutputs, FilterBankExtractor, LossBreakdown,
    PerceptualExtractor, VicreglParams,
};
use crate::model::{
    images_to_tensor, Autoencoder, Checkpoint, CheckpointMeta, Encoder, Heads, Init, ModelConfig, Stage, VarStore,
};
use crate::preprocess::{make_view_inputs, render_view, AugmentConfig, AugmentParams, ViewTransform};

/// Seed of the frozen perceptual backbone; fixed so every run shares it.
pub const PERCEPTUAL_SEED: u64 = 0x7e57_ab1e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Feed Canny edge maps (otherwise grayscale intensities).
    pub use_edges: bool,
    pub use_perceptual: bool,
    pub use_vicregl: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_edges: true,
            use_perceptual: true,
            use_vicregl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: AblationFlags,
    /// Perceptual weight in the reconstruction loss.
    pub beta: f64,
    pub vicregl: VicreglParams,
    pub augment: AugmentConfig,
    /// Pretrain on one augmented view per tile instead of the plain tile.
    pub pretrain_augment: bool,
    /// Only used when pretraining from scratch; fine-tuning takes the
    /// checkpoint's configuration.
    pub model: ModelConfig,
    /// Collapse is declared when the mean per-dimension std of the global
    /// embeddings stays below this for `collapse_patience` epochs.
    pub collapse_std: f64,
    pub collapse_patience: usize,
    /// Tiles in the collapse monitoring batch.
    pub monitor_tiles: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: TrainStage::Pretrain,
            epochs: 100,
            optimizer: AdamWConfig::default(),
            batch_size: 64,
            seed: 0,
            flags: AblationFlags::default(),
            beta: 1.0,
            vicregl: VicreglParams::default(),
            augment: AugmentConfig::paper_defaults(),
            pretrain_augment: false,
            model: ModelConfig::default(),
            collapse_std: 1e-3,
            collapse_patience: 3,
            monitor_tiles: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.vicregl.alpha) || self.vicregl.gamma == 0 {
            return Err(Error::Config("alpha must be in [0, 1] and gamma >= 1".into()));
        }
        self.augment.validate()?;
        self.model.validate()
    }

    /// Augmentation settings adjusted to a model's input size and input kind.
    pub fn augment_for(&self, model: &ModelConfig) -> AugmentConfig {
        AugmentConfig {
            output_size: model.input_size,
            edges: self.flags.use_edges,
            ..self.augment.clone()
        }
    }
}

/// Output locations of a run. All optional; without them the run is purely
/// in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON-lines log of per-step and per-epoch records (appended).
    pub log_path: Option<PathBuf>,
    /// Resume file; written after every epoch and read at start if present.
    pub state_path: Option<PathBuf>,
    /// Latest good model checkpoint; written after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (for tests of resume).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Component-wise mean over the epoch's steps.
    pub mean: LossBreakdown,
    /// Mean per-dimension std of global embeddings on the monitoring batch
    /// (fine-tuning only).
    pub global_std: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum LogRecord<'a> {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        #[serde(flatten)]
        loss: &'a LossBreakdown,
    },
    Epoch(&'a EpochSummary),
}

struct Logger(Option<BufWriter<File>>);

impl Logger {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        match path {
            Some(p) => {
                if let Some(d) = p.parent() {
                    std::fs::create_dir_all(d)?;
                }
                Ok(Self(Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?))))
            }
            None => Ok(Self(None)),
        }
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush()?;
        }
        Ok(())
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let mut m = items[0];
    let n = items.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    m.pixel_l2 = avg(|b| b.pixel_l2);
    m.perceptual = avg(|b| b.perceptual);
    m.global_vicreg = avg(|b| b.global_vicreg);
    m.local_loc_ab = avg(|b| b.local_loc_ab);
    m.local_loc_ba = avg(|b| b.local_loc_ba);
    m.local_feat_ab = avg(|b| b.local_feat_ab);
    m.local_feat_ba = avg(|b| b.local_feat_ba);
    m.total = m.recompose();
    m
}

/// The model input for a tile without augmentation: resize, then edges.
pub fn plain_input(tile: &GrayImage, config: &AugmentConfig) -> Result<GrayImage> {
    let mut cfg = AugmentConfig::identity(config.output_size);
    cfg.edges = config.edges;
    cfg.canny = config.canny;
    Ok(render_view(tile, &AugmentParams::identity(), &cfg)?.0)
}

struct Trainer {
    vs: VarStore,
    opt: AdamW,
    base_lr: f64,
    start_epoch: usize,
    total_steps: usize,
}

impl Trainer {
    fn new(vs: VarStore, config: &TrainConfig, steps_per_epoch: usize, opts: &RunOptions) -> Result<Self> {
        let mut opt = AdamW::new(vs.trainable(), config.optimizer)?;
        let mut start_epoch = 0;
        if let Some(p) = opts.state_path.as_ref().filter(|p| p.exists()) {
            let state = Checkpoint::load(p)?;
            if state.meta.stage != Stage::TrainState {
                return Err(Error::Config(format!("{} is not a train-state file", p.display())));
            }
            let echo: TrainConfig = serde_json::from_value(state.meta.extra.clone())?;
            if echo != *config {
                return Err(Error::Config(format!(
                    "{} was written by a different training configuration; delete it to start over",
                    p.display()
                )));
            }
            state.load_into(&vs, |_| true)?;
            opt.load_from(&state)?;
            start_epoch = state.meta.epoch;
            info!("resuming from epoch {start_epoch}");
        }
        Ok(Self {
            vs,
            opt,
            base_lr: config.optimizer.lr,
            start_epoch,
            total_steps: steps_per_epoch * config.epochs,
        })
    }

    fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let lr = cosine_lr(self.base_lr, self.opt.steps_taken(), self.total_steps);
        let grads = loss.backward()?;
        self.opt.step(&grads, lr)?;
        Ok(lr)
    }

    fn save_state(&self, path: &Option<PathBuf>, config: &TrainConfig, model: &ModelConfig, epoch: usize) -> Result<()> {
        if let Some(p) = path {
            let mut ck = Checkpoint::new(CheckpointMeta {
                stage: Stage::TrainState,
                config: model.clone(),
                seed: config.seed,
                epoch,
                extra: serde_json::to_value(config)?,
            });
            ck.add_store(&self.vs, |_| true)?;
            self.opt.save_into(&mut ck)?;
            ck.save(p)?;
        }
        Ok(())
    }
}

fn model_checkpoint(vs: &VarStore, stage: Stage, model: &ModelConfig, config: &TrainConfig, epoch: usize, keep: &[&str]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointMeta {
        stage,
        config: model.clone(),
        seed: config.seed,
        epoch,
        extra: serde_json::to_value(config)?,
    });
    ck.add_store(vs, |n| keep.iter().any(|k| n.starts_with(k)))?;
    Ok(ck)
}

/// Shared epoch loop: batching, logging, resume state, last-good checkpoint.
fn run_epochs(
    tiles: &ReferenceTileSet,
    config: &TrainConfig,
    model: &ModelConfig,
    trainer: &mut Trainer,
    opts: &RunOptions,
    mut batch_loss: impl FnMut(&[usize], usize) -> Result<crate::losses::LossOutput>,
    mut epoch_end: impl FnMut(usize) -> Result<Option<f64>>,
    checkpoint: impl Fn(usize) -> Result<Checkpoint>,
) -> Result<TrainOutcome> {
    let mut log = Logger::open(&opts.log_path)?;
    let mut summaries = Vec::new();
    let last = match opts.stop_after {
        Some(n) => (trainer.start_epoch + n).min(config.epochs),
        None => config.epochs,
    };
    for epoch in trainer.start_epoch..last {
        let t0 = Instant::now();
        let mut parts = Vec::new();
        let mut lr = config.optimizer.lr;
        for (step, batch) in epoch_batches(config.seed, epoch, tiles.len(), config.batch_size).iter().enumerate() {
            let out = batch_loss(batch, epoch)?;
            if !out.breakdown.total.is_finite() {
                log.flush()?;
                return Err(Error::Numeric {
                    layer: format!("loss at epoch {} step {step}", epoch + 1),
                });
            }
            lr = trainer.step(&out.total)?;
            log.write(&LogRecord::Step {
                epoch: epoch + 1,
                step,
                lr,
                loss: &out.breakdown,
            })?;
            parts.push(out.breakdown);
        }
        if parts.is_empty() {
            return Err(Error::invalid("no batch of at least two tiles"));
        }
        let global_std = epoch_end(epoch)?;
        let summary = EpochSummary {
            epoch: epoch + 1,
            steps: parts.len(),
            lr,
            mean: mean_breakdown(&parts),
            global_std,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {}/{}: loss {:.5} ({} steps, {:.1}s)",
            summary.epoch, config.epochs, summary.mean.total, summary.steps, summary.seconds
        );
        log.write(&LogRecord::Epoch(&summary))?;
        log.flush()?;
        summaries.push(summary);
        if let Some(p) = &opts.checkpoint_path {
            checkpoint(epoch + 1)?.save(p)?;
        }
        trainer.save_state(&opts.state_path, config, model, epoch + 1)?;
    }
    Ok(TrainOutcome {
        checkpoint: checkpoint(last)?,
        epochs: summaries,
    })
}

fn tensor_batch(images: &[GrayImage]) -> Result<Tensor> {
    let refs: Vec<&GrayImage> = images.iter().collect();
    images_to_tensor(&refs, DType::F32, &Device::Cpu)
}

/// Trains encoder and decoder on reference-tile edge maps with the
/// reconstruction loss. Returns a `pretrained` checkpoint with encoder and
/// decoder weights.
pub fn pretrain_autoencoder(tiles: &ReferenceTileSet, config: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let model = config.model.clone();
    let aug = config.augment_for(&model);
    let vs = VarStore::new(DType::F32, Device::Cpu);
    let ae = Autoencoder::new(&model, &vs, config.seed)?;
    let extractor: Option<FilterBankExtractor> = if config.flags.use_perceptual {
        Some(FilterBankExtractor::new(PERCEPTUAL_SEED)?)
    } else {
        None
    };
    let plain: Vec<GrayImage> = if config.pretrain_augment {
        Vec::new()
    } else {
        tiles.tiles().par_iter().map(|t| plain_input(t.image(), &aug)).collect::<Result<_>>()?
    };
    let steps = epoch_batches(config.seed, 0, tiles.len(), config.batch_size).len();
    let mut trainer = Trainer::new(vs.clone(), config, steps, opts)?;

    let batch_loss = |batch: &[usize], epoch: usize| {
        let images: Vec<GrayImage> = if config.pretrain_augment {
            batch
                .par_iter()
                .map(|&i| {
                    let t = &tiles.tiles()[i];
                    let [(view, _), _] = make_view_inputs(t.image(), &aug, item_seed(config.seed, epoch, i), t.meters_per_pixel())?;
                    Ok(view)
                })
                .collect::<Result<_>>()?
        } else {
            batch.iter().map(|&i| plain[i].clone()).collect()
        };
        let x = tensor_batch(&images)?;
        let (_, recon) = ae.forward(&x, true)?;
        autoencoder_loss(&x, &recon, extractor.as_ref().map(|e| e as &dyn PerceptualExtractor), config.beta)
    };
    let ckpt = |epoch| model_checkpoint(&vs, Stage::Pretrained, &model, config, epoch, &["encoder.", "decoder."]);
    run_epochs(tiles, config, &model, &mut trainer, opts, batch_loss, |_| Ok(None), ckpt)
}

/// Fine-tunes the encoder of a `pretrained` checkpoint with the VICRegL
/// objective on augmented view pairs. Returns a `finetuned` checkpoint that
/// holds encoder weights only; the heads are discarded.
///
/// With `use_vicregl` off this is a pass-through: the pretrained encoder is
/// returned unchanged under the `finetuned` tag.
pub fn finetune_encoder(
    tiles: &ReferenceTileSet,
    pretrained: &Checkpoint,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pretrained.meta.stage != Stage::Pretrained {
        return Err(Error::Config(format!(
            "fine-tuning needs a `pretrained` checkpoint, got {:?}",
            pretrained.meta.stage
        )));
    }
    let model = pretrained.meta.config.clone();
    if !config.flags.use_vicregl {
        let mut ck = Checkpoint::new(CheckpointMeta {
            stage: Stage::Finetuned,
            extra: serde_json::json!({ "passthrough": true, "pretrained": pretrained.meta.extra }),
            ..pretrained.meta.clone()
        });
        ck.tensors = pretrained
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with("encoder."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        return Ok(TrainOutcome {
            checkpoint: ck,
            epochs: Vec::new(),
        });
    }

    let aug = config.augment_for(&model);
    let vs = VarStore::new(DType::F32, Device::Cpu);
    let encoder = Encoder::new(&model, &vs, &mut Init::new(config.seed))?;
    pretrained.load_into(&vs, |n| n.starts_with("encoder."))?;
    let heads = Heads::new(&model, &vs, &mut Init::new(item_seed(config.seed, usize::MAX, 0)))?;
    let steps = epoch_batches(config.seed, 0, tiles.len(), config.batch_size).len();
    let mut trainer = Trainer::new(vs.clone(), config, steps, opts)?;

    let monitor: Vec<GrayImage> = tiles.tiles()[..config.monitor_tiles.min(tiles.len())]
        .par_iter()
        .map(|t| plain_input(t.image(), &aug))
        .collect::<Result<_>>()?;

    let batch_loss = |batch: &[usize], epoch: usize| {
        let views: Vec<[(GrayImage, ViewTransform); 2]> = batch
            .par_iter()
            .map(|&i| {
                let t = &tiles.tiles()[i];
                make_view_inputs(t.image(), &aug, item_seed(config.seed, epoch, i), t.meters_per_pixel())
            })
            .collect::<Result<_>>()?;
        let a: Vec<GrayImage> = views.iter().map(|v| v[0].0.clone()).collect();
        let b: Vec<GrayImage> = views.iter().map(|v| v[1].0.clone()).collect();
        let transforms: Vec<(ViewTransform, ViewTransform)> = views.iter().map(|v| (v[0].1, v[1].1)).collect();
        let branch = |imgs: &[GrayImage]| -> Result<BranchOutputs> {
            let out = encoder.forward(&tensor_batch(imgs)?, true)?;
            Ok(BranchOutputs {
                local: heads.project_local(&out.local_map, true)?,
                global: heads.project_global(&out.global_vec, true)?,
            })
        };
        let (ba, bb) = (branch(&a)?, branch(&b)?);
        vicregl_total(&ba, &bb, &transforms, model.input_size, &config.vicregl)
    };

    let mut low_epochs = 0usize;
    let epoch_end = |epoch: usize| -> Result<Option<f64>> {
        if monitor.len() < 2 {
            return Ok(None);
        }
        let g = encoder.forward(&tensor_batch(&monitor)?, false)?.global_vec;
        let std = mean_feature_std(&g)?;
        if std < config.collapse_std {
            low_epochs += 1;
            warn!("epoch {}: global embedding std {std:.2e} below {}", epoch + 1, config.collapse_std);
            if low_epochs >= config.collapse_patience {
                return Err(Error::Collapse(format!(
                    "mean per-dimension std of global embeddings stayed below {} for {} epochs (last {std:.3e}); \
                     lower the learning rate or raise the variance weight",
                    config.collapse_std, low_epochs
                )));
            }
        } else {
            low_epochs = 0;
        }
        Ok(Some(std))
    };
    let ckpt = |epoch| model_checkpoint(&vs, Stage::Finetuned, &model, config, epoch, &["encoder."]);
    run_epochs(tiles, config, &model, &mut trainer, opts, batch_loss, epoch_end, ckpt)
}
