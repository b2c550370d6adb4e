//! Text and image transformer encoders producing local token features and a
//! projected global feature per input.

pub mod image;
pub mod nn;
pub mod text;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

use nn::SeqShape;

pub use image::{patchify, ImageEncoder};
pub use text::TextEncoder;
pub use tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Geometry and width of both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Model width `d`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the MLP as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Patch side `P` in pixels.
    pub patch: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Words per caption `M`; sequences are `M + 2` long.
    pub text_len: usize,
    pub vocab_size: usize,
    /// Width of the shared embedding space.
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Laptop-scale defaults: 64x32 images cut into 8x8 patches.
    pub fn desk() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            patch: 8,
            channels: 3,
            image_h: 64,
            image_w: 32,
            text_len: 16,
            vocab_size: 64,
            embed_dim: 64,
        }
    }

    /// ViT-B/16 geometry on 384x128 pedestrians, 77-word captions.
    pub fn large() -> Self {
        Self {
            width: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            channels: 3,
            image_h: 384,
            image_w: 128,
            text_len: 77,
            vocab_size: 49408,
            embed_dim: 768,
        }
    }

    /// Smallest geometry used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            patch: 4,
            channels: 3,
            image_h: 8,
            image_w: 8,
            text_len: 4,
            vocab_size: 12,
            embed_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_h, self.image_w
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width == 0 || self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::config("widths and channel count must be positive"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocabulary must hold the four special tokens"));
        }
        Ok(())
    }

    /// Patch count `N = H * W / P^2`.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn text_seq_len(&self) -> usize {
        self.text_len + 2
    }

    pub fn image_seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

/// One global vector plus a matrix of local token features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    pub global: Tensor<T>,
    pub locals: Tensor<T>,
    pub modality: Modality,
}

impl<T: Real> FeatureBundle<T> {
    pub fn num_locals(&self) -> usize {
        self.locals.shape()[0]
    }
}

/// A batch pushed through an encoder on a tape.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// Final-layer outputs for every position, `[batch * len, width]`.
    pub tokens: Var,
    /// Projected global features, `[batch, embed_dim]`.
    pub global: Var,
    pub shape: SeqShape,
    /// Per-position validity (`false` at padding), when masking applies.
    pub key_valid: Option<Vec<bool>>,
    pub modality: Modality,
}

impl EncodedBatch {
    /// Copies sample `b` out of the tape, keeping `locals` rows
    /// `local_start..local_start + count`.
    pub fn bundle<T: Real>(
        &self,
        g: &Graph<T>,
        b: usize,
        local_start: usize,
        count: usize,
    ) -> Result<FeatureBundle<T>> {
        let w = g.shape(self.tokens)[1];
        let base = b * self.shape.len + local_start;
        let locals = g.data(self.tokens)[base * w..(base + count) * w].to_vec();
        let e = g.shape(self.global)[1];
        let global = g.data(self.global)[b * e..(b + 1) * e].to_vec();
        Ok(FeatureBundle {
            global: Tensor::new([e], global)?,
            locals: Tensor::new([count, w], locals)?,
            modality: self.modality,
        })
    }
}
