use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::jsonl::{to_jsonl, write_jsonl, JsonlError};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// τ used by this step.
    pub tau: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub steps: Vec<StepMetrics>,
    /// Set when a gradient was non-finite or τ hit the floor.
    pub diverged: bool,
    /// Steps at which τ was clamped to the floor.
    pub tau_floor_hits: Vec<usize>,
    /// Validation accuracy of the final parameters.
    pub final_val_acc: Option<f64>,
}

impl RunMetrics {
    pub fn new(stage: Stage, config_hash: String, seed: u64) -> Self {
        Self {
            stage,
            config_hash,
            seed,
            steps: Vec::new(),
            diverged: false,
            tau_floor_hits: Vec::new(),
            final_val_acc: None,
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.tau).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the last `window` steps.
    pub fn tail_loss(&self, window: usize) -> Option<f64> {
        let n = self.steps.len().min(window);
        (n > 0).then(|| self.steps[self.steps.len() - n..].iter().map(|s| s.loss).sum::<f64>() / n as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.steps
            .iter()
            .all(|s| s.loss.is_finite() && s.tau.is_finite() && s.grad_norm.is_finite() && s.val_acc.is_none_or(f64::is_finite))
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        to_jsonl(&self.steps)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), JsonlError> {
        write_jsonl(path, &self.steps)
    }
}
