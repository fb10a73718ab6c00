//! Convolutional encoder, mirrored decoder and the projection heads.
//!
//! All learnable state lives in a [`VarStore`], keyed by dotted names
//! (`encoder.conv0.weight`, `head.global.fc1.bias`, ...). Checkpoints select
//! tensors by prefix, which is how the decoder is dropped before fine-tuning
//! and the heads are dropped after it.

mod checkpoint;
mod layers;
mod net;

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};
pub use checkpoint::write_atomic;
pub use layers::{
    cells_to_rows, leaky_relu, rows_to_cells, sigmoid, BatchNorm, Conv2d, ConvTranspose2d, Init, Linear, NamedVar,
    VarKind, VarStore,
};
pub use net::{
    encoder_macs, encoder_param_count, images_to_tensor, Autoencoder, Decoder, Encoder, EncoderOutput, Heads,
    ModelConfig, ProjectionHead, LATENT_DIM,
};
pub(crate) use net::check_finite;

use candle_core::{DType, Device};

use crate::error::{Error, Result};

/// Builds an encoder and loads its weights from a `pretrained` or
/// `finetuned` checkpoint. Decoder and head tensors are ignored.
pub fn load_encoder(ckpt: &Checkpoint, dtype: DType) -> Result<Encoder> {
    if ckpt.meta.stage == Stage::TrainState {
        return Err(Error::Config("expected a model checkpoint, got optimizer state".into()));
    }
    let vs = VarStore::new(dtype, Device::Cpu);
    let encoder = Encoder::new(&ckpt.meta.config, &vs, &mut Init::new(0))?;
    ckpt.load_into(&vs, |n| n.starts_with("encoder."))?;
    Ok(encoder)
}
