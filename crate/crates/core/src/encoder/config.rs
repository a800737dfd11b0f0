use serde::{Deserialize, Serialize};

use super::EncoderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Causal,
    Bidirectional,
}

/// Shape of the toy backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub attn_mode: AttnMode,
    /// Inner width of the projection head (`B: d_model → head_hidden`).
    pub head_hidden: usize,
    /// Inner width of each block's feed-forward map.
    pub ffn_hidden: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: 64-wide, two layers, two heads.
    pub fn desk(vocab_size: usize, max_seq: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq,
            attn_mode: AttnMode::Bidirectional,
            head_hidden: 64,
            ffn_hidden: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4 (got {})", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq == 0 {
            return bad("max_seq must be >= 1".into());
        }
        if self.head_hidden == 0 || self.ffn_hidden == 0 {
            return bad("head_hidden and ffn_hidden must be >= 1".into());
        }
        Ok(())
    }
}
