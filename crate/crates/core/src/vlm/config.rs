use serde::{Deserialize, Serialize};

use crate::datasynth::{vocab, RASTER};
use crate::error::{Error, Result};

/// Shape of the tiny decoder-only vision-language model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    /// Square RGB raster side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            d_model: 64,
            heads: 4,
            vocab_size: vocab::VOCAB_SIZE,
            max_seq_len: 48,
            mlp_hidden: 128,
            image_size: RASTER,
            patch_size: 8,
            seed: 0,
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.num_layers == 0 || self.d_model == 0 || self.heads == 0 {
            return bad("layers, width and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image {} not divisible by patch {}", self.image_size, self.patch_size));
        }
        if self.image_size != RASTER {
            return bad(format!("images are rasterised at {RASTER}px"));
        }
        if self.vocab_size < vocab::VOCAB_SIZE {
            return bad(format!("vocabulary must hold the {} world tokens", vocab::VOCAB_SIZE));
        }
        if self.max_seq_len <= self.visual_tokens() {
            return bad("max_seq_len leaves no room for text".into());
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
