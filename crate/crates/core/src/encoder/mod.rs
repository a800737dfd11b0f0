//! The toy backbone: token + position embeddings, attention blocks under a
//! causal or bidirectional mask, masked mean pooling, the residual SELU
//! projection head and L2 normalization. LoRA adapters can be attached to
//! every linear map inside the blocks and fused back into the base weights.

mod config;
mod forward;
mod lora;
mod params;

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use config::{AttnMode, EncoderConfig};
pub use forward::{embed, encode, BoundEncoder};
pub use lora::{LoraAdapter, LoraPair};
pub use params::{EncoderParams, LayerParams, LINEAR_NAMES};

pub const PAD: u32 = 0;
pub const SEP_INSTR: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("query needs {required} tokens but max_seq is {max}")]
    QueryOverflow { required: usize, max: usize },
    #[error("parameters carry no LoRA adapter")]
    NoAdapter,
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A sequence of vocabulary ids standing in for an image or a text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }
}

impl Deref for TokenSeq {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// `<image> SEP_INSTR <instruction>`, or the image alone without an instruction.
pub fn assemble_query(
    image: &TokenSeq,
    instruction: Option<&TokenSeq>,
    max_seq: usize,
) -> Result<TokenSeq, EncoderError> {
    let Some(instr) = instruction else {
        if image.len() > max_seq {
            return Err(EncoderError::QueryOverflow {
                required: image.len(),
                max: max_seq,
            });
        }
        return Ok(image.clone());
    };
    let required = image.len() + 1 + instr.len();
    if required > max_seq {
        return Err(EncoderError::QueryOverflow { required, max: max_seq });
    }
    let mut out = Vec::with_capacity(required);
    out.extend_from_slice(image);
    out.push(SEP_INSTR);
    out.extend_from_slice(instr);
    Ok(TokenSeq(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_without_instruction_passes_through() {
        let q = assemble_query(&TokenSeq(vec![7, 8]), None, 8).unwrap();
        assert_eq!(q.0, vec![7, 8]);
    }

    #[test]
    fn instruction_follows_image_tokens() {
        let q = assemble_query(&TokenSeq(vec![7, 8]), Some(&TokenSeq(vec![9])), 8).unwrap();
        assert_eq!(q.0, vec![7, 8, SEP_INSTR, 9]);
    }

    #[test]
    fn overflow_reports_required_length() {
        let img = TokenSeq(vec![5; 8]);
        let err = assemble_query(&img, Some(&TokenSeq(vec![9])), 8).unwrap_err();
        assert_eq!(err, EncoderError::QueryOverflow { required: 10, max: 8 });
    }
}
