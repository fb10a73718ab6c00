use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{
    cells_to_rows, leaky_gain, leaky_relu, rows_to_cells, sigmoid, BatchNorm, Conv2d, ConvTranspose2d, Init, Linear,
    VarStore,
};
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const LATENT_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub channel_widths: [usize; 4],
    pub latent_dim: usize,
    pub leaky_slope: f64,
    /// Side of the average-pooled grid feeding the 1024-d projection.
    pub pool_grid: usize,
    pub global_head_dim: usize,
    pub local_head_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            channel_widths: [64, 128, 256, 576],
            latent_dim: LATENT_DIM,
            leaky_slope: 0.2,
            pool_grid: 7,
            global_head_dim: 4096,
            local_head_dim: 560,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and a 64 px input for CPU-sized experiments.
    pub fn small() -> Self {
        Self {
            input_size: 64,
            channel_widths: [16, 32, 64, 64],
            pool_grid: 2,
            global_head_dim: 1024,
            ..Self::default()
        }
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / 16
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid_size();
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim != LATENT_DIM {
            return bad(format!("latent_dim must be {LATENT_DIM}, got {}", self.latent_dim));
        }
        if self.input_size % 16 != 0 || g < 2 {
            return bad(format!("input_size must be a multiple of 16 and >= 32, got {}", self.input_size));
        }
        if self.pool_grid == 0 || g % self.pool_grid != 0 {
            return bad(format!("pool_grid {} must divide the {g}x{g} feature grid", self.pool_grid));
        }
        if self.channel_widths.contains(&0) || self.global_head_dim == 0 || self.local_head_dim == 0 {
            return bad("widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }
}

/// `local_map`: `(B, D_f, H_f, W_f)`; `global_vec`: `(B, 1024)`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub local_map: Tensor,
    pub global_vec: Tensor,
}

/// Four stride-2 convolution stages (k4, p1) with batch norm and LeakyReLU,
/// then average pooling to a `pool_grid` square and a linear map to 1024.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: ModelConfig,
    stages: Vec<(Conv2d, BatchNorm)>,
    project: Linear,
}

impl Encoder {
    pub fn new(config: &ModelConfig, vs: &VarStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let gain = leaky_gain(config.leaky_slope);
        let mut c_in = 1;
        let mut stages = Vec::new();
        for (i, &c) in config.channel_widths.iter().enumerate() {
            let conv = Conv2d::new(vs, init, &format!("encoder.conv{i}"), c_in, c, 4, 2, 1, false, gain)?;
            let bn = BatchNorm::new(vs, &format!("encoder.bn{i}"), c)?;
            stages.push((conv, bn));
            c_in = c;
        }
        let flat = c_in * config.pool_grid * config.pool_grid;
        let project = Linear::new(vs, init, "encoder.project", flat, config.latent_dim, true, 1.0)?;
        Ok(Self {
            config: config.clone(),
            stages,
            project,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `x`: `(B, 1, S, S)` with `S = input_size`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<EncoderOutput> {
        let s = self.config.input_size;
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != s || dims[3] != s {
            return Err(Error::invalid(format!("encoder expects (B, 1, {s}, {s}), got {dims:?}")));
        }
        let mut h = x.clone();
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            h = leaky_relu(&bn.forward(&conv.forward(&h)?, train)?, self.config.leaky_slope)?;
            check_finite(&h, &format!("encoder stage {i}"))?;
        }
        let local_map = h;
        let k = self.config.grid_size() / self.config.pool_grid;
        let pooled = if k == 1 { local_map.clone() } else { local_map.avg_pool2d(k)? };
        let global_vec = self.project.forward(&pooled.flatten_from(1)?)?;
        check_finite(&global_vec, "encoder projection")?;
        Ok(EncoderOutput { local_map, global_vec })
    }
}

/// Mirror of the encoder driven by the 1024-d latent; sigmoid output.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: ModelConfig,
    expand: Linear,
    stages: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
}

impl Decoder {
    pub fn new(config: &ModelConfig, vs: &VarStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let gain = leaky_gain(config.leaky_slope);
        let w = config.channel_widths;
        let g = config.pool_grid;
        let expand = Linear::new(vs, init, "decoder.expand", config.latent_dim, w[3] * g * g, true, gain)?;
        let chans = [w[3], w[2], w[1], w[0], 1];
        let mut stages = Vec::new();
        for i in 0..4 {
            let last = i == 3;
            let conv = ConvTranspose2d::new(
                vs,
                init,
                &format!("decoder.deconv{i}"),
                chans[i],
                chans[i + 1],
                4,
                2,
                1,
                last,
                if last { 1.0 } else { gain },
            )?;
            let bn = if last {
                None
            } else {
                Some(BatchNorm::new(vs, &format!("decoder.bn{i}"), chans[i + 1])?)
            };
            stages.push((conv, bn));
        }
        Ok(Self {
            config: config.clone(),
            expand,
            stages,
        })
    }

    /// `latent`: `(B, 1024)` to `(B, 1, S, S)` in `[0, 1]`.
    pub fn forward(&self, latent: &Tensor, train: bool) -> Result<Tensor> {
        let (b, d) = latent.dims2()?;
        if d != self.config.latent_dim {
            return Err(Error::invalid(format!("decoder expects {} latent dims, got {d}", self.config.latent_dim)));
        }
        let g = self.config.pool_grid;
        let c = self.config.channel_widths[3];
        let slope = self.config.leaky_slope;
        let mut h = leaky_relu(&self.expand.forward(latent)?, slope)?.reshape((b, c, g, g))?;
        let f = self.config.grid_size();
        if f != g {
            h = h.upsample_nearest2d(f, f)?;
        }
        for (conv, bn) in &self.stages {
            h = conv.forward(&h)?;
            h = match bn {
                Some(bn) => leaky_relu(&bn.forward(&h, train)?, slope)?,
                None => sigmoid(&h)?,
            };
        }
        Ok(h)
    }
}

/// Two `linear → BN → ReLU` blocks followed by a plain linear layer.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    blocks: Vec<(Linear, BatchNorm)>,
    out: Linear,
    d_in: usize,
}

impl ProjectionHead {
    pub fn new(vs: &VarStore, init: &mut Init, name: &str, d_in: usize, width: usize) -> Result<Self> {
        let relu_gain = 2f64.sqrt();
        let mut blocks = Vec::new();
        let mut d = d_in;
        for i in 0..2 {
            blocks.push((
                Linear::new(vs, init, &format!("{name}.fc{i}"), d, width, true, relu_gain)?,
                BatchNorm::new(vs, &format!("{name}.bn{i}"), width)?,
            ));
            d = width;
        }
        let out = Linear::new(vs, init, &format!("{name}.fc2"), width, width, true, 1.0)?;
        Ok(Self { blocks, out, d_in })
    }

    /// `x`: `(N, d_in)`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.d_in {
            return Err(Error::invalid(format!("head expects {} input dims, got {d}", self.d_in)));
        }
        let mut h = x.clone();
        for (fc, bn) in &self.blocks {
            h = bn.forward(&fc.forward(&h)?, train)?.relu()?;
        }
        self.out.forward(&h)
    }
}

/// Expander heads used only while fine-tuning.
#[derive(Debug, Clone)]
pub struct Heads {
    pub global: ProjectionHead,
    pub local: ProjectionHead,
}

impl Heads {
    pub fn new(config: &ModelConfig, vs: &VarStore, init: &mut Init) -> Result<Self> {
        Ok(Self {
            global: ProjectionHead::new(vs, init, "head.global", config.latent_dim, config.global_head_dim)?,
            local: ProjectionHead::new(vs, init, "head.local", config.channel_widths[3], config.local_head_dim)?,
        })
    }

    /// `(B, 1024)` to `(B, global_head_dim)`.
    pub fn project_global(&self, global_vec: &Tensor, train: bool) -> Result<Tensor> {
        self.global.forward(global_vec, train)
    }

    /// `(B, D_f, H, W)` to `(B, local_head_dim, H, W)`, one head application per cell.
    pub fn project_local(&self, local_map: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, h, w) = local_map.dims4()?;
        let rows = self.local.forward(&cells_to_rows(local_map)?, train)?;
        rows_to_cells(&rows, b, h, w)
    }
}

/// Encoder plus decoder for the reconstruction stage.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(config: &ModelConfig, vs: &VarStore, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let encoder = Encoder::new(config, vs, &mut init)?;
        let decoder = Decoder::new(config, vs, &mut init)?;
        Ok(Self { encoder, decoder })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<(EncoderOutput, Tensor)> {
        let enc = self.encoder.forward(x, train)?;
        let recon = self.decoder.forward(&enc.global_vec, train)?;
        Ok((enc, recon))
    }
}

/// Stacks single-channel images into `(B, 1, H, W)`.
pub fn images_to_tensor(images: &[&GrayImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::invalid("images in a batch must share dimensions"));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub(crate) fn check_finite(t: &Tensor, layer: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.to_string() })
    }
}

/// Multiply-accumulate count of one encoder pass (one image). Convolution
/// and linear layers only; normalization and activations are ignored.
pub fn encoder_macs(config: &ModelConfig) -> u64 {
    let mut side = config.input_size as u64;
    let mut c_in = 1u64;
    let mut macs = 0u64;
    for &c in &config.channel_widths {
        side /= 2;
        macs += side * side * c as u64 * c_in * 16;
        c_in = c as u64;
    }
    let g = config.pool_grid as u64;
    macs + c_in * g * g * config.latent_dim as u64
}

/// Trainable parameter count of the encoder, derived from the layer shapes.
pub fn encoder_param_count(config: &ModelConfig) -> usize {
    let mut c_in = 1;
    let mut n = 0;
    for &c in &config.channel_widths {
        n += c * c_in * 16 + 2 * c;
        c_in = c;
    }
    n + c_in * config.pool_grid * config.pool_grid * config.latent_dim + config.latent_dim
}
