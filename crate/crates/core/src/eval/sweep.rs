use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{recall_at_k, QueryGroundTruth};
use crate::error::{Error, Result};
use crate::geodata::ReferenceTile;
use crate::image::{AnyImage, RgbImage};
use crate::retrieval::{build_index, rank, EmbeddingModel, Metric};

/// Inference-time perturbation of the reference tiles. The level is the
/// maximum rotation in degrees, the kept crop fraction, or the jitter
/// strength in `[0, 1]` interpolating `(0, 0, 0, 0)` to `(0.4, 0.4, 0.4, 0.1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    Rotation,
    CenterCrop,
    ColorJitter,
}

impl Perturbation {
    pub fn is_identity(self, level: f64) -> bool {
        match self {
            Perturbation::Rotation | Perturbation::ColorJitter => level == 0.0,
            Perturbation::CenterCrop => level == 1.0,
        }
    }

    /// Whether a level's outcome depends on the random draw.
    pub fn is_random(self, level: f64) -> bool {
        !self.is_identity(level) && self != Perturbation::CenterCrop
    }

    pub fn default_levels(self) -> Vec<f64> {
        match self {
            Perturbation::Rotation => vec![0.0, 15.0, 30.0, 45.0, 60.0],
            Perturbation::CenterCrop => vec![1.0, 0.9, 0.75, 0.6, 0.5],
            Perturbation::ColorJitter => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub perturbation: Perturbation,
    pub level: f64,
    /// Recall@1 of each run.
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run or identical runs.
    pub std: f64,
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { c / max };
    [h / 6.0, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Brightness, contrast and saturation factors and a hue shift (fraction of
/// a turn), applied in that order and clamped to `[0, 1]`.
pub fn color_jitter(img: &RgbImage, brightness: f32, contrast: f32, saturation: f32, hue: f32) -> RgbImage {
    let clamp = |p: [f32; 3]| p.map(|v| v.clamp(0.0, 1.0));
    let luma = |p: [f32; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    // unit factors are skipped so an identity jitter is exact
    let mut out = img.clone();
    if brightness != 1.0 {
        out = out.map(|p| clamp(p.map(|v| v * brightness)));
    }
    if contrast != 1.0 {
        let mean = out.pixels().iter().map(|&p| luma(p)).sum::<f32>() / out.pixels().len().max(1) as f32;
        out = out.map(|p| clamp(p.map(|v| (v - mean) * contrast + mean)));
    }
    if saturation != 1.0 {
        out = out.map(|p| {
            let l = luma(p);
            clamp(p.map(|v| (v - l) * saturation + l))
        });
    }
    if hue == 0.0 {
        return out;
    }
    out.map(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        clamp(hsv_to_rgb([h + hue, s, v]))
    })
}

/// One random draw of a perturbation at `level`. Identity levels return
/// the tile unchanged.
pub fn perturb_tile(tile: &ReferenceTile, kind: Perturbation, level: f64, rng: &mut impl Rng) -> ReferenceTile {
    if kind.is_identity(level) {
        return tile.clone();
    }
    let image = match kind {
        Perturbation::Rotation => AnyImage::Gray(tile.image.to_gray().rotate(rng.random_range(-level..=level))),
        Perturbation::CenterCrop => AnyImage::Gray(tile.image.to_gray().center_crop_resize(level)),
        Perturbation::ColorJitter => {
            let t = level as f32;
            let mut factor = |max: f32| rng.random_range((1.0 - max).max(0.0)..=1.0 + max);
            let (b, c, s) = (factor(0.4 * t), factor(0.4 * t), factor(0.4 * t));
            let h = 0.1 * t;
            let h = rng.random_range(-h..=h);
            AnyImage::Rgb(color_jitter(&tile.image.to_rgb(), b, c, s, h))
        }
    };
    ReferenceTile {
        image,
        ..tile.clone()
    }
}

/// For each level, rebuilds the index from perturbed reference tiles `runs`
/// times and scores the fixed query embeddings with Recall@1 at `d` meters.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_sweep(
    tiles: &[ReferenceTile],
    model: &EmbeddingModel,
    queries: &[(String, Vec<f32>)],
    truth: &[QueryGroundTruth],
    kind: Perturbation,
    levels: &[f64],
    runs: usize,
    d: f64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let mut scores = Vec::with_capacity(runs);
        for run in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((li as u64) << 32) ^ run as u64);
            let perturbed: Vec<ReferenceTile> = tiles.iter().map(|t| perturb_tile(t, kind, level, &mut rng)).collect();
            let index = build_index(&perturbed, model, "")?;
            let results = queries
                .iter()
                .map(|(id, v)| rank(id, v, &index, 1, Metric::Cosine))
                .collect::<Result<Vec<_>>>()?;
            scores.push(recall_at_k(&results, truth, &index, 1, d)?);
            if !kind.is_random(level) {
                // deterministic level: every run would repeat this one
                scores.resize(runs, scores[0]);
                break;
            }
        }
        let (mean, std) = if scores.iter().all(|&s| s == scores[0]) {
            (scores[0], 0.0)
        } else {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt())
        };
        rows.push(SweepRow {
            perturbation: kind,
            level,
            runs: scores,
            mean,
            std,
        });
    }
    Ok(rows)
}
