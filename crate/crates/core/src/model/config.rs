use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Maximum tokens-plus-patches per sequence.
    pub context: usize,
    pub vocab: usize,
    pub patches: usize,
    pub patch_features: usize,
    pub vision_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn: 256,
            context: 128,
            vocab: 256,
            patches: 16,
            patch_features: 8,
            vision_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn == 0 || self.vision_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.context < self.patches + 16 {
            return bad(format!("context {} < patches {} + 16", self.context, self.patches));
        }
        if self.vocab < crate::synthdata::MIN_VOCAB {
            return bad(format!("vocab {} too small", self.vocab));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
