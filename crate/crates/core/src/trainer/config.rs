use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::encoder::EncoderConfig;
use crate::hashing::sha256_hex;

use super::RunError;

/// Batch shape of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchGeometry {
    /// `n` image queries against `m` caption candidates.
    Contrastive { n: usize, m: usize },
    /// `images` images, each queried under `group_size` distinct instructions.
    Grouped { images: usize, group_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub batch: BatchGeometry,
    /// 0 trains without an adapter (bootstrap only).
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Initial temperature; must be absent for stage 2, which inherits τ.
    pub tau_init: Option<f64>,
    pub seed: u64,
    /// Validation every this many steps (and after the last); 0 = last only.
    pub eval_every: usize,
    /// Training images held out for validation, taken from the end of the id order.
    pub val_images: usize,
    /// Stage 1: also update base weights alongside the adapter.
    pub train_base_weights: bool,
    /// Backbone shape for bootstrap and stage 1; `None` picks the desk shape for the corpus.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    /// Required for stage 2.
    #[serde(default)]
    pub stage1_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Mining model: in-batch negatives only, every weight trained.
    pub fn desk_bootstrap(seed: u64) -> Self {
        Self {
            stage: Stage::Bootstrap,
            steps: 300,
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 1e-3,
            warmup_frac: 0.03,
            batch: BatchGeometry::Contrastive { n: 32, m: 32 },
            lora_rank: 0,
            lora_alpha: 0.0,
            tau_init: Some(0.07),
            seed,
            eval_every: 50,
            val_images: 32,
            train_base_weights: true,
            encoder: None,
            stage1_checkpoint: None,
        }
    }

    pub fn desk_stage1(seed: u64) -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 500,
            batch: BatchGeometry::Contrastive { n: 16, m: 128 },
            lora_rank: 16,
            lora_alpha: 32.0,
            ..Self::desk_bootstrap(seed)
        }
    }

    pub fn desk_stage2(seed: u64, stage1_checkpoint: PathBuf) -> Self {
        Self {
            stage: Stage::Finetune,
            steps: 100,
            batch: BatchGeometry::Grouped { images: 8, group_size: 4 },
            lora_rank: 4,
            lora_alpha: 8.0,
            tau_init: None,
            train_base_weights: false,
            stage1_checkpoint: Some(stage1_checkpoint),
            ..Self::desk_bootstrap(seed)
        }
    }

    /// Full-size settings; `encoder` still has to describe the backbone.
    pub fn paper(stage: Stage, seed: u64) -> Self {
        let base = Self {
            stage,
            steps: 4000,
            lr: 4e-5,
            betas: (0.9, 0.999),
            weight_decay: 1e-3,
            warmup_frac: 0.03,
            batch: BatchGeometry::Contrastive { n: 512, m: 4096 },
            lora_rank: 64,
            lora_alpha: 128.0,
            tau_init: Some(0.07),
            seed,
            eval_every: 100,
            val_images: 800,
            train_base_weights: false,
            encoder: None,
            stage1_checkpoint: None,
        };
        match stage {
            Stage::Bootstrap => Self {
                steps: 1000,
                batch: BatchGeometry::Contrastive { n: 256, m: 256 },
                lora_rank: 0,
                lora_alpha: 0.0,
                train_base_weights: true,
                ..base
            },
            Stage::Pretrain => base,
            Stage::Finetune => Self {
                steps: 100,
                batch: BatchGeometry::Grouped { images: 128, group_size: 4 },
                lora_rank: 16,
                lora_alpha: 32.0,
                tau_init: None,
                stage1_checkpoint: Some(PathBuf::from("stage1.abce")),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0 (got {})", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must be in [0, 1) (got {})", self.warmup_frac));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must be in [0, 1) (got {b1}, {b2})"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        if self.lora_rank > 0 && !(self.lora_alpha > 0.0) {
            return bad(format!("lora_alpha must be > 0 (got {})", self.lora_alpha));
        }
        match (self.stage, self.tau_init) {
            (Stage::Finetune, Some(_)) => return bad("tau_init must be null for stage 2 (τ is frozen)".into()),
            (Stage::Finetune, None) => {}
            (_, None) => return bad("tau_init is required".into()),
            (_, Some(t)) if !(t > 0.0 && t.is_finite()) => return bad(format!("tau_init must be > 0 (got {t})")),
            _ => {}
        }
        match (self.stage, self.batch) {
            (Stage::Bootstrap, BatchGeometry::Contrastive { n, m }) if n == 0 || n != m => {
                return bad(format!("bootstrap uses in-batch negatives only: need n == m > 0 (got {n}, {m})"))
            }
            (Stage::Pretrain, BatchGeometry::Contrastive { n, m }) if n == 0 || m < n || m % n != 0 => {
                return bad(format!("m ({m}) must be a positive multiple of n ({n})"))
            }
            (Stage::Finetune, BatchGeometry::Grouped { images, group_size }) if images == 0 || group_size == 0 => {
                return bad("grouped batches need images > 0 and group_size > 0".into())
            }
            (Stage::Bootstrap | Stage::Pretrain, BatchGeometry::Contrastive { .. })
            | (Stage::Finetune, BatchGeometry::Grouped { .. }) => {}
            (stage, _) => return bad(format!("batch geometry does not match stage {stage}")),
        }
        match self.stage {
            Stage::Bootstrap if self.lora_rank != 0 => return bad("bootstrap trains without an adapter".into()),
            Stage::Pretrain | Stage::Finetune if self.lora_rank == 0 => {
                return bad(format!("stage {} needs lora_rank > 0", self.stage))
            }
            Stage::Finetune if self.train_base_weights => return bad("stage 2 keeps base weights frozen".into()),
            Stage::Finetune if self.stage1_checkpoint.is_none() => {
                return bad("stage 2 requires stage1_checkpoint".into())
            }
            Stage::Finetune if self.encoder.is_some() => {
                return bad("stage 2 takes its encoder shape from the stage-1 checkpoint".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
