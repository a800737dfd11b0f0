//! Training runs: the in-batch bootstrap model used for mining, stage-1
//! pretraining with mined negatives, stage-2 instruction fine-tuning, and
//! the temperature / architecture / scaling experiment harnesses.

mod config;
mod experiments;
mod metrics;
mod optim;
mod runs;

use thiserror::Error;

use crate::batching::BatchError;
use crate::checkpoint::{CheckpointError, Stage};
use crate::corpus::CorpusError;
use crate::encoder::EncoderError;
use crate::mining::MiningError;
use crate::objective::ObjectiveError;
use crate::tensor::TensorError;

pub use config::{BatchGeometry, TrainConfig};
pub use experiments::{
    run_arch_ablation, run_scaling_experiment, run_tau_experiment, ArchAblationConfig, ArchReport, ArchRow,
    ScalingConfig, ScalingReport, ScalingRow, TauExperimentConfig, TauPair, TauReport,
};
pub use metrics::{RunMetrics, StepMetrics};
pub use optim::{adamw_update, lr_schedule, warmup_steps, AdamW, StepOutcome, ADAM_EPS};
pub use runs::{
    argmax_accuracy, contrastive_step_graph, finetune_step_graph, positive_records, run_bootstrap, run_stage1,
    run_stage2, split_validation, stage2_base, CandidateTable, RunOutput, TAU_FLOOR,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("expected a stage-{expected} input checkpoint, found stage {found}")]
    StageMismatch { expected: Stage, found: Stage },
    #[error("training diverged at step {step} (non-finite loss or gradient)")]
    Diverged { step: usize, metrics: Box<RunMetrics> },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
