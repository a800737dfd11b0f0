use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{AttnMode, EncoderConfig};
use crate::mining::{build_random_dataset, MinedDataset, SimilarityTable};
use crate::rng::derive_seed;

use super::metrics::RunMetrics;
use super::runs::{run_stage1, RunOutput};
use super::{BatchGeometry, RunError, TrainConfig};

const RANDOM_NEG_STREAM: u64 = 11;

/// A diverged run is a result, not a failure, inside an experiment.
fn recorded(run: Result<RunOutput, RunError>) -> Result<RunMetrics, RunError> {
    match run {
        Ok(out) => Ok(out.metrics),
        Err(RunError::Diverged { metrics, .. }) => Ok(*metrics),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauExperimentConfig {
    /// Stage-1 settings shared by both arms; `seed` is replaced per seed.
    pub pretrain: TrainConfig,
    pub seeds: Vec<u64>,
}

impl TauExperimentConfig {
    pub fn desk() -> Self {
        Self {
            pretrain: TrainConfig::desk_stage1(0),
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPair {
    pub seed: u64,
    pub mined: RunMetrics,
    pub random: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub pairs: Vec<TauPair>,
}

impl TauReport {
    /// `(seed, final τ mined, final τ random)` per seed.
    pub fn final_taus(&self) -> Vec<(u64, f64, f64)> {
        self.pairs
            .iter()
            .map(|p| (p.seed, last_tau(&p.mined), last_tau(&p.random)))
            .collect()
    }
}

fn last_tau(m: &RunMetrics) -> f64 {
    m.steps.last().map_or(f64::NAN, |s| s.tau)
}

/// Paired stage-1 runs per seed that differ only in where negatives come
/// from: the mined dataset, or the same number of uniformly random captions.
pub fn run_tau_experiment(
    config: &TauExperimentConfig,
    corpus: &Corpus,
    mined: &MinedDataset,
    table: &SimilarityTable,
) -> Result<TauReport, RunError> {
    if config.seeds.is_empty() {
        return Err(RunError::Config("tau experiment needs at least one seed".into()));
    }
    let k = mined.min_negatives();
    let mut pairs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let cfg = TrainConfig {
            seed,
            ..config.pretrain.clone()
        };
        let random = build_random_dataset(corpus, table, k, derive_seed(seed, RANDOM_NEG_STREAM))?;
        log::info!("tau experiment seed {seed}: mined negatives");
        let mined_run = recorded(run_stage1(&cfg, corpus, mined))?;
        log::info!("tau experiment seed {seed}: random negatives");
        let random_run = recorded(run_stage1(&cfg, corpus, &random))?;
        pairs.push(TauPair {
            seed,
            mined: mined_run,
            random: random_run,
        });
    }
    Ok(TauReport { pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchAblationConfig {
    pub pretrain: TrainConfig,
    pub attn_modes: Vec<AttnMode>,
    /// Alpha follows each rank at the base config's `lora_alpha / lora_rank` ratio.
    pub lora_ranks: Vec<usize>,
}

impl ArchAblationConfig {
    /// Both attention modes at ranks 4, 8 and 16.
    pub fn desk(seed: u64) -> Self {
        Self {
            pretrain: TrainConfig::desk_stage1(seed),
            attn_modes: vec![AttnMode::Causal, AttnMode::Bidirectional],
            lora_ranks: vec![4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchRow {
    pub attn_mode: AttnMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub final_val_acc: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_tau: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub rows: Vec<ArchRow>,
}

/// Stage-1 runs over every attention mode × adapter rank, equal seed and steps.
pub fn run_arch_ablation(
    config: &ArchAblationConfig,
    corpus: &Corpus,
    mined: &MinedDataset,
) -> Result<ArchReport, RunError> {
    let base = &config.pretrain;
    if base.lora_rank == 0 {
        return Err(RunError::Config("base config needs lora_rank > 0".into()));
    }
    let ratio = base.lora_alpha / base.lora_rank as f64;
    let encoder = base
        .encoder
        .clone()
        .unwrap_or_else(|| EncoderConfig::desk(corpus.vocab.size, corpus.config.query_len()));
    let mut rows = Vec::new();
    for &attn_mode in &config.attn_modes {
        for &rank in &config.lora_ranks {
            let cfg = TrainConfig {
                lora_rank: rank,
                lora_alpha: ratio * rank as f64,
                encoder: Some(EncoderConfig {
                    attn_mode,
                    ..encoder.clone()
                }),
                ..base.clone()
            };
            log::info!("arch ablation: {attn_mode:?}, rank {rank}");
            let m = recorded(run_stage1(&cfg, corpus, mined))?;
            rows.push(ArchRow {
                attn_mode,
                lora_rank: rank,
                lora_alpha: cfg.lora_alpha,
                final_val_acc: m.final_val_acc,
                final_loss: m.final_loss(),
                final_tau: last_tau(&m),
                diverged: m.diverged,
            });
        }
    }
    Ok(ArchReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    /// Batch `B` and step count `S`.
    pub pretrain: TrainConfig,
    /// Compares `B` for `factor·S` steps against `factor·B` for `S` steps.
    pub batch_factor: usize,
    /// Number of step-doubling runs at batch `B`: `steps · 2^i`, `i < doubling_runs`.
    pub doubling_runs: usize,
}

impl ScalingConfig {
    /// 40-step base runs, a 4× batch comparison and three step doublings.
    pub fn desk(seed: u64) -> Self {
        Self {
            pretrain: TrainConfig {
                steps: 40,
                ..TrainConfig::desk_stage1(seed)
            },
            batch_factor: 4,
            doubling_runs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    /// Image queries processed: `n · steps`.
    pub samples_seen: usize,
    pub final_val_acc: Option<f64>,
    pub final_loss: Option<f64>,
    /// Mean loss over the last tenth of the run.
    pub tail_loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| run | N | M | steps | samples | val acc | final loss | tail loss |\n|---|---|---|---|---|---|---|---|\n",
        );
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.label,
                r.n,
                r.m,
                r.steps,
                r.samples_seen,
                f(r.final_val_acc),
                f(r.final_loss),
                f(r.tail_loss)
            ));
        }
        out
    }
}

/// Batch-size comparison at equal samples seen, plus a step-doubling series.
pub fn run_scaling_experiment(
    config: &ScalingConfig,
    corpus: &Corpus,
    mined: &MinedDataset,
) -> Result<ScalingReport, RunError> {
    let BatchGeometry::Contrastive { n, m } = config.pretrain.batch else {
        return Err(RunError::Config("scaling runs use contrastive batches".into()));
    };
    let f = config.batch_factor;
    if f == 0 {
        return Err(RunError::Config("batch_factor must be >= 1".into()));
    }
    let steps = config.pretrain.steps;
    let mut plan = vec![
        ("batch x1".to_string(), n, m, steps * f),
        (format!("batch x{f}"), n * f, m * f, steps),
    ];
    for i in 0..config.doubling_runs {
        plan.push((format!("steps x{}", 1usize << i), n, m, steps << i));
    }
    if plan[0].1 * plan[0].3 != plan[1].1 * plan[1].3 {
        return Err(RunError::Config("batch comparison must hold samples seen equal".into()));
    }
    let mut rows = Vec::with_capacity(plan.len());
    for (label, n, m, steps) in plan {
        let cfg = TrainConfig {
            steps,
            batch: BatchGeometry::Contrastive { n, m },
            ..config.pretrain.clone()
        };
        log::info!("scaling: {label} (N={n}, M={m}, {steps} steps)");
        let metrics = recorded(run_stage1(&cfg, corpus, mined))?;
        rows.push(ScalingRow {
            label,
            n,
            m,
            steps,
            samples_seen: n * steps,
            final_val_acc: metrics.final_val_acc,
            final_loss: metrics.final_loss(),
            tail_loss: metrics.tail_loss((steps / 10).max(1)),
            diverged: metrics.diverged,
        });
    }
    Ok(ScalingReport { rows })
}
