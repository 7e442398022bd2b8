//! The three trainable networks as pure parameterized forward maps on the
//! autodiff tape: a style-conditioned U-Net generator, an attention-gated
//! U-Net segmenter, and PatchGAN discriminators with residual linear
//! attention.

pub mod params;
pub mod ops;
pub mod style_unet;
pub mod attention_unet;
pub mod discriminator;

pub use params::{
    AttentionUNetParams, ConvP, LinP, ParamStruct, PatchDiscriminatorParams, StyleUNetParams,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("spatial size {h}x{w} is not divisible by 2^{depth}")]
    IndivisibleSize { h: usize, w: usize, depth: usize },
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input {h}x{w} is smaller than the discriminator receptive field")]
    InputTooSmall { h: usize, w: usize },
    #[error("decoder level {level} has no style assignment")]
    UnassignedLevel { level: usize },
    #[error("style index {index} out of range (have {count} styles)")]
    StyleIndexOutOfRange { index: usize, count: usize },
}

/// Architecture hyperparameters shared by all three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square working resolution; every raster is resized to this.
    pub image_size: usize,
    /// U-Net depth (number of downsampling stages).
    pub depth: usize,
    /// Channel count of the first encoder stage; doubles per level.
    pub base_width: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    pub disc_base_width: usize,
    /// Stride-2 convolutions in the discriminator stack (a stride-1 layer and
    /// the score conv follow).
    pub disc_stride2_layers: usize,
    /// Inner dimension of the discriminator's linear-attention block.
    pub attn_dim: usize,
    pub adain_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 256,
            depth: 4,
            base_width: 64,
            latent_dim: 128,
            style_dim: 128,
            mapping_layers: 4,
            disc_base_width: 64,
            disc_stride2_layers: 3,
            attn_dim: 32,
            adain_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Channel width of encoder/decoder level `i` (0 = finest).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.depth
    }

    pub fn validate_spatial(&self, h: usize, w: usize) -> Result<(), NetworkError> {
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(NetworkError::IndivisibleSize {
                h,
                w,
                depth: self.depth,
            });
        }
        Ok(())
    }
}
