//! Pipeline configuration: one TOML file, layered over built-in defaults
//! and under command-line `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use refloc::eval::{EvalConfig, Perturbation};
use refloc::geodata::{MissingTilePolicy, ReferenceDbParams};
use refloc::preprocess::AugmentConfig;
use refloc::retrieval::{InputSpec, Metric};
use refloc::synth::SynthConfig;
use refloc::training::{TrainConfig, TrainStage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub geodata: GeodataConfig,
    /// Shared by both training stages; `stage` is set by the pipeline.
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvaluateConfig,
    pub ablate: AblateConfig,
    pub synth: SynthConfig,
}

/// Unset inputs fall back to the corpus written by `synth` under the workdir.
/// Without a `raster`, `[geodata]` tiling is taken from that corpus as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub workdir: PathBuf,
    /// Orthophoto with a `.pgw` world file and a `.crs.json` sidecar.
    pub raster: Option<PathBuf>,
    /// `timestamp,e,n,altitude,heading` CSV in the raster's CRS.
    pub trajectory: Option<PathBuf>,
    /// Directory of query PNGs; the file stem is the query id.
    pub queries: Option<PathBuf>,
    /// `query_id,true_e,true_n,altitude,timestamp` CSV.
    pub truth: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            raster: None,
            trajectory: None,
            queries: None,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct GeodataConfig {
    /// Lattice pitch in meters.
    pub spacing: f64,
    /// Corridor half-width in meters.
    pub half_width: f64,
    pub focal_length_mm: f64,
    pub sensor_width_mm: f64,
    /// Crop-sizing altitude; the trajectory mean when unset.
    pub altitude: Option<f64>,
    pub on_missing: MissingTilePolicy,
    /// Stored tile side in pixels; native crop size when unset.
    pub store_px: Option<usize>,
}

impl Default for GeodataConfig {
    fn default() -> Self {
        Self {
            spacing: 100.0,
            half_width: 700.0,
            focal_length_mm: 8.0,
            sensor_width_mm: 6.4,
            altitude: None,
            on_missing: MissingTilePolicy::Skip,
            store_px: None,
        }
    }
}

impl GeodataConfig {
    pub fn params(&self) -> ReferenceDbParams {
        ReferenceDbParams {
            spacing: self.spacing,
            half_width: self.half_width,
            focal_length_mm: self.focal_length_mm,
            sensor_width_mm: self.sensor_width_mm,
            altitude: self.altitude,
            on_missing: self.on_missing,
        }
    }
}

/// Fine-tuning settings that differ from `[train]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    #[default]
    Finetuned,
    /// The ablation without fine-tuning.
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub metric: Metric,
    pub top_k: usize,
    pub encoder: EncoderChoice,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            top_k: 10,
            encoder: EncoderChoice::Finetuned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Empty disables the sweep.
    pub perturbations: Vec<Perturbation>,
    pub runs: usize,
    /// Recall@1 threshold in meters; the first `eval.thresholds` entry when unset.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            perturbations: Vec::new(),
            runs: 5,
            threshold: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub report: EvalConfig,
    /// Also score with candidates limited to this radius around the truth.
    pub restricted_radius: Option<f64>,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoVicregl,
    NoPerceptual,
    NoEdges,
    NoCosine,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoVicregl,
        Variant::NoPerceptual,
        Variant::NoEdges,
        Variant::NoCosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVicregl => "no-vicregl",
            Variant::NoPerceptual => "no-perceptual",
            Variant::NoEdges => "no-edges",
            Variant::NoCosine => "no-cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    /// Training seeds; each runs every variant.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl PipelineConfig {
    /// Built-in defaults, then the file, then `--paper-defaults`, then each
    /// `key.path=value` override in order.
    pub fn resolve(file: Option<&Path>, paper_defaults: bool, overrides: &[String]) -> Result<Self> {
        let mut config = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        if paper_defaults {
            config.apply_paper_defaults();
        }
        if !overrides.is_empty() {
            let mut value = toml::Value::try_from(&config)?;
            for o in overrides {
                apply_override(&mut value, o)?;
            }
            config = value.try_into().context("applying --set overrides")?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Resets the training constants to the published values: augmentation
    /// (vignette σ 70, ±30°, 70-100% crops, blur kernel 5, brightness and
    /// contrast factors in [0, 2]), β = 1, α = 0.75, γ = 20 and 100 epochs.
    pub fn apply_paper_defaults(&mut self) {
        let canny = self.train.augment.canny;
        self.train.augment = AugmentConfig {
            canny,
            ..AugmentConfig::paper_defaults()
        };
        self.train.beta = 1.0;
        self.train.vicregl.alpha = 0.75;
        self.train.vicregl.gamma = 20;
        self.train.epochs = 100;
        self.finetune.epochs = None;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune_config().validate()?;
        if self.retrieval.top_k == 0 {
            bail!("retrieval.top_k must be >= 1");
        }
        if self.eval.report.ks.is_empty() || self.eval.report.thresholds.is_empty() {
            bail!("eval.report needs at least one K and one threshold");
        }
        if let Some(r) = self.eval.restricted_radius {
            if !(r > 0.0) {
                bail!("eval.restricted_radius must be > 0");
            }
        }
        if self.eval.sweep.runs == 0 {
            bail!("eval.sweep.runs must be >= 1");
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            stage: TrainStage::Pretrain,
            ..self.train.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let mut c = TrainConfig {
            stage: TrainStage::Finetune,
            ..self.train.clone()
        };
        if let Some(e) = self.finetune.epochs {
            c.epochs = e;
        }
        if let Some(lr) = self.finetune.lr {
            c.optimizer.lr = lr;
        }
        c
    }

    /// Preprocessing shared by indexing and localization.
    pub fn input_spec(&self) -> InputSpec {
        InputSpec {
            size: self.train.model.input_size,
            edges: self.train.flags.use_edges,
            canny: self.train.augment.canny,
        }
    }

    pub fn sweep_threshold(&self) -> f64 {
        self.eval.sweep.threshold.unwrap_or(self.eval.report.thresholds[0])
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Sets `a.b.c=value`, parsing the value as TOML and falling back to a bare
/// string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .with_context(|| format!("`{}` is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split yields at least one part")
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
