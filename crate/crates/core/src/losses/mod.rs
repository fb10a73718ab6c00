//! Reconstruction loss for pretraining and the VICRegL objective for
//! fine-tuning.
//!
//! Every loss returns both a differentiable scalar tensor and a
//! [`LossBreakdown`] of plain numbers for logging. The breakdown's `total` is
//! recomputed from its parts with [`LossBreakdown::recompose`].

mod matching;
mod perceptual;
mod vicreg;

pub use matching::{cell_centers, feature_matches, location_matches, MatchPair, MatchSet};
pub use perceptual::{FilterBankExtractor, PerceptualExtractor, StubExtractor};
pub use vicreg::{mean_feature_std, vicreg_criterion, vicreg_terms, VicregCoeffs, VicregTerms, VAR_EPS};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cells_to_rows, check_finite};
use crate::preprocess::ViewTransform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha: f64,
    pub gamma: usize,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Autoencoder,
    Vicregl,
}

/// Scalar components of one loss evaluation. Terms that do not apply to the
/// stage are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kind: LossKind,
    pub total: f64,
    pub pixel_l2: f64,
    pub perceptual: f64,
    pub global_vicreg: f64,
    pub local_loc_ab: f64,
    pub local_loc_ba: f64,
    pub local_feat_ab: f64,
    pub local_feat_ba: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `pixel + β·perceptual` or `α·global + (1 − α)·(four local terms)`.
    pub fn recompose(&self) -> f64 {
        let w = &self.weights;
        match self.kind {
            LossKind::Autoencoder => self.pixel_l2 + w.beta * self.perceptual,
            LossKind::Vicregl => {
                let local = self.local_loc_ab + self.local_loc_ba + self.local_feat_ab + self.local_feat_ba;
                w.alpha * self.global_vicreg + (1.0 - w.alpha) * local
            }
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn components(&self) -> [f64; 8] {
        [
            self.total,
            self.pixel_l2,
            self.perceptual,
            self.global_vicreg,
            self.local_loc_ab,
            self.local_loc_ba,
            self.local_feat_ab,
            self.local_feat_ba,
        ]
    }
}

/// Differentiable total plus its logged breakdown.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// `mean((I − recon)²) + β·Σ_l mean((φ_l(I) − φ_l(recon))²)` over `(B, 1, H, W)`
/// batches. Squared norms are averaged per element so that layers of
/// different sizes contribute on one scale. With no extractor the
/// perceptual term is exactly zero.
pub fn autoencoder_loss(
    target: &Tensor,
    recon: &Tensor,
    extractor: Option<&dyn PerceptualExtractor>,
    beta: f64,
) -> Result<LossOutput> {
    if target.dims() != recon.dims() {
        return Err(Error::invalid(format!(
            "target {:?} and reconstruction {:?} differ in shape",
            target.dims(),
            recon.dims()
        )));
    }
    let pixel = mse(target, recon)?;
    let mut total = pixel.clone();
    let mut perceptual_val = 0.0;
    if let Some(ext) = extractor {
        let ft = ext.features(&target.detach())?;
        let fr = ext.features(recon)?;
        if ft.len() != fr.len() {
            return Err(Error::invalid("extractor returned a varying number of layers"));
        }
        let mut perceptual = Tensor::zeros((), recon.dtype(), &Device::Cpu)?;
        for (l, (a, b)) in ft.iter().zip(&fr).enumerate() {
            check_finite(b, &format!("{}.layer{l}", ext.name()))?;
            perceptual = (perceptual + mse(&a.detach(), b)?)?;
        }
        perceptual_val = scalar(&perceptual)?;
        total = (total + perceptual.affine(beta, 0.0)?)?;
    }
    let mut breakdown = LossBreakdown {
        kind: LossKind::Autoencoder,
        total: 0.0,
        pixel_l2: scalar(&pixel)?,
        perceptual: perceptual_val,
        global_vicreg: 0.0,
        local_loc_ab: 0.0,
        local_loc_ba: 0.0,
        local_feat_ab: 0.0,
        local_feat_ba: 0.0,
        weights: LossWeights {
            beta,
            alpha: 0.0,
            gamma: 0,
            lambda: 0.0,
            mu: 0.0,
            nu: 0.0,
        },
    };
    breakdown.total = breakdown.recompose();
    Ok(LossOutput { total, breakdown })
}

/// How matched local vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum LocalCriterion {
    /// Invariance over matched pairs, variance and covariance over all
    /// retained matched vectors.
    #[default]
    Vicreg,
    /// Mean squared error over matched pairs only.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct VicreglParams {
    pub alpha: f64,
    pub gamma: usize,
    pub coeffs: VicregCoeffs,
    pub local_criterion: LocalCriterion,
}

impl Default for VicreglParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 20,
            coeffs: VicregCoeffs::default(),
            local_criterion: LocalCriterion::Vicreg,
        }
    }
}

/// Projected outputs for one view of a batch: local `(B, D_l, H, W)` and
/// global `(B, D_g)`.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub local: Tensor,
    pub global: Tensor,
}

fn gather_pairs(
    src: &Tensor,
    dst: &Tensor,
    sets: &[MatchSet],
    cells: usize,
) -> Result<(Tensor, Tensor)> {
    let mut si = Vec::new();
    let mut di = Vec::new();
    for (b, set) in sets.iter().enumerate() {
        for pair in &set.pairs {
            si.push((b * cells + pair.p) as u32);
            di.push((b * cells + pair.q) as u32);
        }
    }
    let n = si.len();
    let si = Tensor::from_vec(si, n, &Device::Cpu)?;
    let di = Tensor::from_vec(di, n, &Device::Cpu)?;
    Ok((src.index_select(&si, 0)?, dst.index_select(&di, 0)?))
}

/// `α·ℓ(z_*, z'_*) + (1 − α)·[L_s(z, z') + L_s(z', z) + L_d(z, z') + L_d(z', z)]`.
///
/// `transforms[i]` holds the view transforms of batch item `i`, and
/// `view_size` is the side of the rendered views, used to place cell centers.
pub fn vicregl_total(
    a: &BranchOutputs,
    b: &BranchOutputs,
    transforms: &[(ViewTransform, ViewTransform)],
    view_size: usize,
    params: &VicreglParams,
) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {}", params.alpha)));
    }
    if a.local.dims() != b.local.dims() || a.global.dims() != b.global.dims() {
        return Err(Error::invalid("the two branches differ in shape"));
    }
    let (batch, dim, h, w) = a.local.dims4()?;
    if transforms.len() != batch {
        return Err(Error::invalid(format!("{} transforms for a batch of {batch}", transforms.len())));
    }
    let coeffs = &params.coeffs;
    let global = vicreg_criterion(&a.global, &b.global, coeffs)?;

    let cells = h * w;
    let ra = cells_to_rows(&a.local)?;
    let rb = cells_to_rows(&b.local)?;
    let mut loc_ab = Vec::with_capacity(batch);
    let mut loc_ba = Vec::with_capacity(batch);
    for (ta, tb) in transforms {
        loc_ab.push(location_matches(ta, tb, (h, w), view_size, params.gamma)?);
        loc_ba.push(location_matches(tb, ta, (h, w), view_size, params.gamma)?);
    }
    let va = ra.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let vb = rb.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let stride = cells * dim;
    let mut feat_ab = Vec::with_capacity(batch);
    let mut feat_ba = Vec::with_capacity(batch);
    for i in 0..batch {
        let za = &va[i * stride..(i + 1) * stride];
        let zb = &vb[i * stride..(i + 1) * stride];
        feat_ab.push(feature_matches(za, zb, dim, params.gamma)?);
        feat_ba.push(feature_matches(zb, za, dim, params.gamma)?);
    }

    let criterion = |src: &Tensor, dst: &Tensor, sets: &[MatchSet]| -> Result<Tensor> {
        let (s, d) = gather_pairs(src, dst, sets, cells)?;
        match params.local_criterion {
            LocalCriterion::Vicreg => vicreg_criterion(&s, &d, coeffs),
            LocalCriterion::Mse => mse(&s, &d),
        }
    };
    let l_loc_ab = criterion(&ra, &rb, &loc_ab)?;
    let l_loc_ba = criterion(&rb, &ra, &loc_ba)?;
    let l_feat_ab = criterion(&ra, &rb, &feat_ab)?;
    let l_feat_ba = criterion(&rb, &ra, &feat_ba)?;

    let local = (((&l_loc_ab + &l_loc_ba)? + &l_feat_ab)? + &l_feat_ba)?;
    let total = (global.affine(params.alpha, 0.0)? + local.affine(1.0 - params.alpha, 0.0)?)?;

    let mut breakdown = LossBreakdown {
        kind: LossKind::Vicregl,
        total: 0.0,
        pixel_l2: 0.0,
        perceptual: 0.0,
        global_vicreg: scalar(&global)?,
        local_loc_ab: scalar(&l_loc_ab)?,
        local_loc_ba: scalar(&l_loc_ba)?,
        local_feat_ab: scalar(&l_feat_ab)?,
        local_feat_ba: scalar(&l_feat_ba)?,
        weights: LossWeights {
            beta: 0.0,
            alpha: params.alpha,
            gamma: params.gamma,
            lambda: coeffs.lambda,
            mu: coeffs.mu,
            nu: coeffs.nu,
        },
    };
    breakdown.total = breakdown.recompose();
    Ok(LossOutput { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use crate::preprocess::{Affine2, PhotometricParams};

    fn t(shape: &[usize], seed: u64) -> Tensor {
        Init::new(seed).normal(shape, 1.0).unwrap()
    }

    fn ident() -> ViewTransform {
        ViewTransform {
            affine: Affine2::IDENTITY,
            photometric: PhotometricParams {
                brightness: 1.0,
                contrast: 1.0,
                noise_sigma: 0.0,
                blur_applied: false,
                vignette_applied: false,
            },
        }
    }

    #[test]
    fn autoencoder_identity_and_beta_zero() {
        let x = t(&[2, 1, 16, 16], 1).abs().unwrap();
        let r = t(&[2, 1, 16, 16], 2).abs().unwrap();
        let ext = FilterBankExtractor::new(0).unwrap();
        let same = autoencoder_loss(&x, &x, Some(&ext), 1.0).unwrap();
        assert_eq!(same.breakdown.total, 0.0);
        let b0 = autoencoder_loss(&x, &r, Some(&ext), 0.0).unwrap();
        assert_eq!(b0.breakdown.total, b0.breakdown.pixel_l2);
        let off = autoencoder_loss(&x, &r, None, 1.0).unwrap();
        assert_eq!(off.breakdown.perceptual, 0.0);
        assert!(autoencoder_loss(&x, &t(&[2, 1, 8, 8], 3), None, 1.0).is_err());
    }

    #[test]
    fn vicreg_vanishes_on_whitened_identical_batches() {
        // rows ±2 e_d: per-dim std >= 1, zero mean, zero off-diagonal covariance
        let d = 4;
        let mut rows = Vec::new();
        for k in 0..d {
            for s in [2.0, -2.0] {
                let mut r = vec![0.0f64; d];
                r[k] = s;
                rows.extend(r);
            }
        }
        let z = Tensor::from_vec(rows, (2 * d, d), &Device::Cpu).unwrap();
        let v = scalar(&vicreg_criterion(&z, &z, &VicregCoeffs::default()).unwrap()).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        assert!(vicreg_criterion(&z.narrow(0, 0, 1).unwrap(), &z.narrow(0, 0, 1).unwrap(), &VicregCoeffs::default()).is_err());
    }

    #[test]
    fn constant_batch_triggers_variance_hinge() {
        let z = Tensor::ones((8, 16), DType::F64, &Device::Cpu).unwrap();
        let terms = vicreg_terms(&z, &z).unwrap();
        let v = scalar(&terms.variance).unwrap();
        assert!((v - (1.0 - VAR_EPS.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn vicregl_alpha_one_is_global_only_and_weights_echo() {
        let a = BranchOutputs {
            local: t(&[3, 8, 3, 3], 1),
            global: t(&[3, 16], 2),
        };
        let b = BranchOutputs {
            local: t(&[3, 8, 3, 3], 3),
            global: t(&[3, 16], 4),
        };
        let tr = vec![(ident(), ident()); 3];
        let p = VicreglParams {
            alpha: 1.0,
            ..Default::default()
        };
        let out = vicregl_total(&a, &b, &tr, 48, &p).unwrap();
        let g = scalar(&vicreg_criterion(&a.global, &b.global, &p.coeffs).unwrap()).unwrap();
        assert!((scalar(&out.total).unwrap() - g).abs() < 1e-12);
        let out = vicregl_total(&a, &b, &tr, 48, &VicreglParams::default()).unwrap();
        assert_eq!((out.breakdown.weights.alpha, out.breakdown.weights.gamma), (0.75, 20));
        assert!((out.breakdown.total - scalar(&out.total).unwrap()).abs() < 1e-9);
        assert!(out.breakdown.components().iter().all(|&c| c >= 0.0));
    }
}
