use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct VicregCoeffs {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

impl Default for VicregCoeffs {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            mu: 25.0,
            nu: 1.0,
        }
    }
}

/// Std-dev stabilizer inside the variance hinge.
pub const VAR_EPS: f64 = 1e-4;

/// Unweighted terms; `criterion = λ·invariance + μ·variance + ν·covariance`.
#[derive(Debug, Clone)]
pub struct VicregTerms {
    pub invariance: Tensor,
    pub variance: Tensor,
    pub covariance: Tensor,
}

impl VicregTerms {
    pub fn weighted(&self, c: &VicregCoeffs) -> Result<Tensor> {
        Ok(((self.invariance.affine(c.lambda, 0.0)? + self.variance.affine(c.mu, 0.0)?)?
            + self.covariance.affine(c.nu, 0.0)?)?)
    }
}

fn hinge_and_cov(z: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d) = z.dims2()?;
    let centered = z.broadcast_sub(&z.mean_keepdim(0)?)?;
    let var = centered.sqr()?.sum_keepdim(0)?.affine(1.0 / (n as f64 - 1.0), 0.0)?;
    let std = (var.clone() + VAR_EPS)?.sqrt()?;
    let hinge = std.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let cov = centered.t()?.matmul(&centered)?.affine(1.0 / (n as f64 - 1.0), 0.0)?;
    let off = (cov.sqr()?.sum_all()? - var.sqr()?.sum_all()?)?.affine(1.0 / d as f64, 0.0)?;
    Ok((hinge, off))
}

/// The three VICReg terms over two `(N, D)` batches:
///
/// - invariance: mean over all `N·D` entries of `(Z − Z')²`
/// - variance: `(v(Z) + v(Z')) / 2`, `v(Z) = mean_d max(0, 1 − sqrt(Var_d(Z) + ε))`
/// - covariance: `c(Z) + c(Z')`, `c(Z) = Σ_{i≠j} C(Z)_{ij}² / D`
///
/// Variances and covariances use the unbiased `N − 1` divisor.
pub fn vicreg_terms(z: &Tensor, z2: &Tensor) -> Result<VicregTerms> {
    let (n, d) = z.dims2()?;
    if z2.dims() != z.dims() {
        return Err(Error::invalid(format!("batch shapes differ: {:?} vs {:?}", z.dims(), z2.dims())));
    }
    if n < 2 {
        return Err(Error::invalid(format!("VICReg needs a batch of at least 2, got {n}")));
    }
    if d == 0 {
        return Err(Error::invalid("zero-dimensional embeddings"));
    }
    let invariance = (z - z2)?.sqr()?.mean_all()?;
    let (ha, ca) = hinge_and_cov(z)?;
    let (hb, cb) = hinge_and_cov(z2)?;
    Ok(VicregTerms {
        invariance,
        variance: (ha + hb)?.affine(0.5, 0.0)?,
        covariance: (ca + cb)?,
    })
}

/// Weighted VICReg criterion as a scalar tensor.
pub fn vicreg_criterion(z: &Tensor, z2: &Tensor, coeffs: &VicregCoeffs) -> Result<Tensor> {
    vicreg_terms(z, z2)?.weighted(coeffs)
}

/// Per-dimension standard deviation of a `(N, D)` batch, averaged over dims.
pub fn mean_feature_std(z: &Tensor) -> Result<f64> {
    let z = z.to_dtype(candle_core::DType::F64)?;
    let n = z.dim(0)?;
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let centered = z.broadcast_sub(&z.mean_keepdim(0)?)?;
    let std = centered.sqr()?.sum_keepdim(0)?.affine(1.0 / (n as f64 - 1.0), 0.0)?.sqrt()?;
    Ok(std.mean(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?[0])
}
