use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay. Moments are kept in f64 whatever the
/// parameter dtype.
pub struct AdamW {
    config: AdamWConfig,
    params: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(params: Vec<Var>, config: AdamWConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.shape(), DType::F64, p.device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let g = g.detach().to_dtype(DType::F64)?;
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + c.eps)?)?;
            let w = p.as_tensor().detach().to_dtype(DType::F64)?;
            let w = ((&w * (1.0 - lr * c.weight_decay))? - (update * lr)?)?;
            p.set(&w.to_dtype(p.dtype())?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for i in 0..self.params.len() {
            ckpt.insert(&format!("adamw.m.{i}"), &self.m[i])?;
            ckpt.insert(&format!("adamw.v.{i}"), &self.v[i])?;
        }
        ckpt.insert("adamw.step", &Tensor::new(self.step as f64, &candle_core::Device::Cpu)?)?;
        Ok(())
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let dev = candle_core::Device::Cpu;
        for i in 0..self.params.len() {
            let get = |k: String| -> Result<Tensor> {
                ckpt.tensor(&k, DType::F64, &dev)?
                    .ok_or_else(|| crate::Error::Config(format!("train state lacks {k}")))
            };
            self.m[i] = get(format!("adamw.m.{i}"))?;
            self.v[i] = get(format!("adamw.v.{i}"))?;
        }
        let step = ckpt
            .tensor("adamw.step", DType::F64, &dev)?
            .ok_or_else(|| crate::Error::Config("train state lacks adamw.step".into()))?;
        self.step = step.to_scalar::<f64>()? as usize;
        Ok(())
    }
}
