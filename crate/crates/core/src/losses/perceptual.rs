use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::model::Init;

/// Frozen feature extractor for the perceptual term. Takes `(B, 1, H, W)`
/// images in `[0, 1]` and returns one activation tensor per tapped layer.
/// Gradients must flow to the input; the extractor's own weights are constant.
pub trait PerceptualExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

struct Block {
    weight: Tensor,
    padding: usize,
}

/// Fixed three-block convolutional backbone: oriented Gaussian-derivative
/// filters, then two seeded random convolutions, each block followed by ReLU
/// and 2×2 average pooling. Block outputs are the tapped layers.
///
/// Each block's weights are rescaled once at construction so that its output
/// has unit root-mean-square on a seeded random sparse binary image, which
/// puts the perceptual term on a fixed scale independent of the bank's
/// normalization.
pub struct FilterBankExtractor {
    blocks: Vec<Block>,
}

fn gaussian_derivative_bank(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut bank = Vec::new();
    for k in 0..4 {
        let theta = k as f64 * std::f64::consts::FRAC_PI_4;
        let (s, co) = theta.sin_cos();
        let mut d1 = Vec::with_capacity(size * size);
        let mut d2 = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let u = dx * co + dy * s;
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                d1.push(-u / (sigma * sigma) * g);
                d2.push((u * u / sigma.powi(4) - 1.0 / (sigma * sigma)) * g);
            }
        }
        for f in [d1, d2] {
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let f: Vec<f64> = f.iter().map(|v| v - mean).collect();
            let l1: f64 = f.iter().map(|v| v.abs()).sum();
            let f: Vec<f64> = f.iter().map(|v| v / l1).collect();
            bank.push(f.iter().map(|v| -v).collect());
            bank.push(f);
        }
    }
    bank
}

impl FilterBankExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let bank = gaussian_derivative_bank(7, 1.2);
        let c1 = bank.len();
        let w1: Vec<f64> = bank.iter().flatten().copied().collect();
        let w1 = Tensor::from_vec(w1, (c1, 1, 7, 7), &Device::Cpu)?;
        let mut init = Init::new(seed);
        let w2 = init.normal(&[32, c1, 3, 3], (2.0 / (c1 * 9) as f64).sqrt())?;
        let w3 = init.normal(&[64, 32, 3, 3], (2.0 / (32 * 9) as f64).sqrt())?;
        let mut blocks = vec![
            Block { weight: w1, padding: 3 },
            Block { weight: w2, padding: 1 },
            Block { weight: w3, padding: 1 },
        ];
        let probe = init.normal(&[4, 1, 64, 64], 1.0)?.gt(1.28)?.to_dtype(DType::F64)?;
        let mut h = probe;
        for b in &mut blocks {
            let out = b.apply(&h)?;
            let rms = out.sqr()?.mean_all()?.sqrt()?.to_scalar::<f64>()?;
            if rms > 0.0 {
                // ReLU and pooling are positively homogeneous
                b.weight = (&b.weight / rms)?;
            }
            h = b.apply(&h)?;
        }
        Ok(Self { blocks })
    }
}

impl Block {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.to_dtype(x.dtype())?;
        Ok(x.conv2d(&k, self.padding, 1, 1, 1)?.relu()?.avg_pool2d(2)?)
    }
}

impl PerceptualExtractor for FilterBankExtractor {
    fn name(&self) -> &str {
        "filter-bank-3"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!(
                "perceptual input must be (B, 1, H, W) with H, W divisible by 8, got {:?}",
                x.dims()
            )));
        }
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.apply(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Two cheap differentiable taps: the image scaled by two, and its 2×2
/// average pool squared. Exists so perceptual terms can be computed by hand.
pub struct StubExtractor;

impl PerceptualExtractor for StubExtractor {
    fn name(&self) -> &str {
        "stub-2"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.affine(2.0, 0.0)?, x.avg_pool2d(2)?.sqr()?])
    }
}

