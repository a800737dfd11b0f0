//! The "ABCE" checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ABCE" | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! then per tensor: name_len u32 | name | rank u32 | dims u64[rank] | f32[numel]
//! ```
//!
//! Tensors appear in [`EncoderParams::named`] order. Values are stored as
//! `f32`, so a save → load → save cycle is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderError, EncoderParams, LoraAdapter, LoraPair};
use crate::hashing::sha256_hex;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABCE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not an ABCE checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("tensor `{0}` is not part of this model")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("expected a stage {expected} checkpoint, found stage {found}")]
    StageMismatch { expected: Stage, found: Stage },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Which run produced the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "bootstrap")]
    Bootstrap,
    #[serde(rename = "1")]
    Pretrain,
    #[serde(rename = "2")]
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Bootstrap => "bootstrap",
            Stage::Pretrain => "1",
            Stage::Finetune => "2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub stage: Stage,
    pub step: u64,
    /// `exp(log_tau)` of the stored (f32) temperature.
    pub tau: f64,
    pub seed: u64,
    pub lora: Option<LoraMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: EncoderParams<f64>,
}

impl Checkpoint {
    pub fn new(params: EncoderParams<f64>, stage: Stage, step: u64, seed: u64) -> Self {
        let stored_log_tau = params.log_tau.item() as f32;
        let meta = CheckpointMeta {
            config: params.config.clone(),
            stage,
            step,
            tau: f64::from(stored_log_tau).exp(),
            seed,
            lora: params.lora.as_ref().map(|l| LoraMeta {
                rank: l.rank,
                alpha: l.alpha,
            }),
        };
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in self.params.named() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;

        let mut tensors: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        while r.pos < bytes.len() {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.insert(name, Tensor::new(shape, data).map_err(EncoderError::from)?);
        }

        let mut params = EncoderParams::<f64>::init(&meta.config, 0)?;
        if let Some(l) = &meta.lora {
            params.lora = Some(LoraAdapter {
                rank: l.rank,
                alpha: l.alpha,
                pairs: params
                    .linear_targets()
                    .into_iter()
                    .map(|t| {
                        (
                            t,
                            LoraPair {
                                down: Tensor::zeros(&[0]),
                                up: Tensor::zeros(&[0]),
                            },
                        )
                    })
                    .collect(),
            });
        }
        for (name, slot) in params.named_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let adapter_slot = name.starts_with("lora.");
            if !adapter_slot && t.shape() != slot.shape() {
                return Err(CheckpointError::TensorShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                });
            }
            *slot = t;
        }
        if let Some((name, _)) = tensors.into_iter().next() {
            return Err(CheckpointError::UnexpectedTensor(name));
        }
        if meta.stage == Stage::Finetune {
            params.freeze_base();
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the producing stage.
    pub fn load_stage(path: &Path, expected: Stage) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.meta.stage != expected {
            return Err(CheckpointError::StageMismatch {
                expected,
                found: ck.meta.stage,
            });
        }
        Ok(ck)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttnMode;

    fn params() -> EncoderParams<f64> {
        let cfg = EncoderConfig {
            vocab_size: 9,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            max_seq: 5,
            attn_mode: AttnMode::Causal,
            head_hidden: 3,
            ffn_hidden: 6,
        };
        let mut p = EncoderParams::init(&cfg, 4).unwrap();
        p.attach_lora(2, 4.0, 1).unwrap();
        p
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = Checkpoint::new(params(), Stage::Pretrain, 17, 4);
        let first = ck.to_bytes();
        let loaded = Checkpoint::from_bytes(&first).unwrap();
        assert_eq!(loaded.meta.step, 17);
        assert_eq!(loaded.params.lora.as_ref().unwrap().rank, 2);
        assert_eq!(loaded.to_bytes(), first);
    }

    #[test]
    fn values_survive_up_to_f32_cast() {
        let p = params();
        let loaded = Checkpoint::from_bytes(&Checkpoint::new(p.clone(), Stage::Bootstrap, 0, 0).to_bytes()).unwrap();
        for ((n, a), (_, b)) in p.named().into_iter().zip(loaded.params.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32), "{n}");
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::new(params(), Stage::Finetune, 0, 0).to_bytes();
        assert_eq!(&bytes[..4], b"ABCE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        assert_eq!(meta["stage"], "2");
        assert!(meta["config"]["d_model"].is_number());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = Checkpoint::new(params(), Stage::Pretrain, 0, 0).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn finetune_stage_loads_frozen_base() {
        let ck = Checkpoint::from_bytes(&Checkpoint::new(params(), Stage::Finetune, 0, 0).to_bytes()).unwrap();
        assert!(ck.params.is_frozen("head.a"));
        assert!(ck.params.is_frozen("log_tau"));
        assert!(!ck.params.is_frozen("lora.layers.0.wq.up"));
    }
}
