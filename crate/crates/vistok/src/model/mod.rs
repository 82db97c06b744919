//! Desk-scale multimodal decoder: linear patch encoder with a two-layer
//! adaptor, a pre-norm causal transformer over interleaved text/image slots,
//! autoregressive loss over supervised positions, AdamW training with a
//! warmup+cosine schedule, and greedy generation.

mod backward;
mod forward;
mod generate;
mod gradcheck;
mod params;
#[cfg(test)]
mod tests;
mod train;

pub use forward::{
    embed_sequence, forward, forward_examples, loss, loss_and_grad_logits, patch_embed, Batch, ForwardCache,
};
pub use generate::generate;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{load_checkpoint, save_checkpoint, LayerParams, ModelParams};
pub use train::{lr_at, train_step, TrainState};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Element type for model arithmetic. f32 for training, f64 for gradient
/// verification.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: f64,
    pub vocab_size: usize,
    pub context_len: usize,
    /// Model-input image side; pages are downscaled to this before patching.
    pub image_side_px: u32,
    pub patch_px: u32,
    pub adaptor_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Training-speed defaults: 64 tokens per image.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4.0,
            vocab_size: 512,
            context_len: 2048,
            image_side_px: 192,
            patch_px: 24,
            adaptor_hidden: 256,
            seed: 0,
        }
    }

    /// 576 tokens per image (768-px input, 32-px patches); budget experiments only.
    pub fn paper_geometry() -> Self {
        ModelConfig { image_side_px: 768, patch_px: 32, ..Self::toy() }
    }

    /// Small f64 config for finite-difference checks.
    pub fn grad_check_config() -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2.0,
            vocab_size: 512,
            context_len: 256,
            image_side_px: 48,
            patch_px: 24,
            adaptor_hidden: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArg(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_px == 0 || !self.image_side_px.is_multiple_of(self.patch_px) {
            return Err(Error::NotDivisible { side: self.image_side_px, patch: self.patch_px });
        }
        if self.vocab_size < crate::textok::RESERVED as usize + 256 {
            return Err(Error::InvalidArg("vocab_size too small for reserved + byte tokens".into()));
        }
        Ok(())
    }

    pub fn tokens_per_image(&self) -> usize {
        let grid = (self.image_side_px / self.patch_px) as usize;
        grid * grid
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        (self.d_model as f64 * self.ffn_mult) as usize
    }

    pub fn patch_dim(&self) -> usize {
        (self.patch_px * self.patch_px) as usize
    }
}
