use std::sync::{Arc, RwLock};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Trainable,
    /// Running statistics; updated in training mode, never by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct NamedVar {
    pub name: String,
    pub kind: VarKind,
    pub var: Var,
}

/// Ordered registry of every tensor a network owns. Cloning shares storage.
#[derive(Debug, Clone)]
pub struct VarStore {
    vars: Arc<RwLock<Vec<NamedVar>>>,
    dtype: DType,
    device: Device,
}

impl VarStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: Arc::new(RwLock::new(Vec::new())),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&self, name: String, kind: VarKind, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let mut vars = self.vars.write().expect("poisoned");
        if vars.iter().any(|v| v.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        vars.push(NamedVar {
            name,
            kind,
            var: var.clone(),
        });
        Ok(var)
    }

    pub fn all(&self) -> Vec<NamedVar> {
        self.vars.read().expect("poisoned").clone()
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.all()
            .into_iter()
            .filter(|v| v.kind == VarKind::Trainable)
            .map(|v| v.var)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.read().expect("poisoned").iter().find(|v| v.name == name).map(|v| v.var.clone())
    }
}

/// Seeded weight source; candle's own RNG is not reproducible across runs.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }
}

/// Fan-in normal with the gain of the following activation.
fn fan_in_std(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Logistic function written through `tanh`, which stays finite in both the
/// forward and backward pass for large magnitudes.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &VarStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let std = fan_in_std(c_in * k * k, gain);
        let weight = vs.register(format!("{name}.weight"), VarKind::Trainable, init.normal(&[c_out, c_in, k, k], std)?)?;
        let bias = if bias {
            Some(vs.register(format!("{name}.bias"), VarKind::Trainable, Tensor::zeros(c_out, DType::F64, &Device::Cpu)?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &VarStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        // each output pixel receives (k / stride)^2 taps per input channel
        let taps = (k / stride).max(1);
        let std = fan_in_std(c_in * taps * taps, gain);
        let weight = vs.register(format!("{name}.weight"), VarKind::Trainable, init.normal(&[c_in, c_out, k, k], std)?)?;
        let bias = if bias {
            Some(vs.register(format!("{name}.bias"), VarKind::Trainable, Tensor::zeros(c_out, DType::F64, &Device::Cpu)?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(vs: &VarStore, init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Result<Self> {
        let weight = vs.register(
            format!("{name}.weight"),
            VarKind::Trainable,
            init.normal(&[d_out, d_in], fan_in_std(d_in, gain))?,
        )?;
        let bias = if bias {
            Some(vs.register(format!("{name}.bias"), VarKind::Trainable, Tensor::zeros(d_out, DType::F64, &Device::Cpu)?)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// `x`: `(N, d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(N, C)` or `(N, C, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(vs: &VarStore, name: &str, channels: usize) -> Result<Self> {
        let ones = Tensor::ones(channels, DType::F64, &Device::Cpu)?;
        let zeros = Tensor::zeros(channels, DType::F64, &Device::Cpu)?;
        Ok(Self {
            gamma: vs.register(format!("{name}.weight"), VarKind::Trainable, ones.clone())?,
            beta: vs.register(format!("{name}.bias"), VarKind::Trainable, zeros.clone())?,
            running_mean: vs.register(format!("{name}.running_mean"), VarKind::Buffer, zeros)?,
            running_var: vs.register(format!("{name}.running_var"), VarKind::Buffer, ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        let c = x.dim(1)?;
        let stat_shape: Vec<usize> = (0..rank).map(|i| if i == 1 { c } else { 1 }).collect();
        let (mean, var) = if train {
            let n = x.elem_count() / c;
            if n < 2 {
                return Err(Error::invalid("batch norm in training mode needs more than one value per channel"));
            }
            let dims: Vec<usize> = (0..rank).filter(|&i| i != 1).collect();
            let mean = x.mean_keepdim(dims.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(dims.as_slice())?;
            let m = self.momentum;
            let bm = mean.detach().flatten_all()?;
            let bv = var.detach().flatten_all()?.affine(n as f64 / (n as f64 - 1.0), 0.0)?;
            self.running_mean
                .set(&(self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + bm.affine(m, 0.0)?)?)?;
            self.running_var
                .set(&(self.running_var.as_tensor().affine(1.0 - m, 0.0)? + bv.affine(m, 0.0)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(stat_shape.as_slice())?,
                self.running_var.as_tensor().reshape(stat_shape.as_slice())?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.as_tensor().reshape(stat_shape.as_slice())?;
        let b = self.beta.as_tensor().reshape(stat_shape.as_slice())?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Flattens `(N, C, H, W)` to `(N·H·W, C)`, one row per spatial cell.
pub fn cells_to_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?)
}

/// Inverse of [`cells_to_rows`].
pub fn rows_to_cells(x: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    Ok(x.reshape((n, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}
