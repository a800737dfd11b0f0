use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;

use crate::batching::{build_finetune_batches_over, build_pretrain_batches};
use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::{Corpus, CorpusError};
use crate::encoder::{assemble_query, embed, BoundEncoder, EncoderConfig, EncoderParams, TokenSeq};
use crate::graph::{Graph, NodeId};
use crate::mining::{MinedDataset, MinedRecord};
use crate::objective::{loss_with_stop_gradient, BatchLayout};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::Graph64;

use super::metrics::{RunMetrics, StepMetrics};
use super::optim::{lr_schedule, AdamW, StepOutcome};
use super::{BatchGeometry, RunError, TrainConfig};

/// Lower bound on τ. Reaching it clamps τ and flags the run as diverged.
pub const TAU_FLOOR: f64 = 1e-3;

const LORA_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;
const EMBED_BATCH: usize = 128;

/// Trained parameters and the per-step log of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: EncoderParams<f64>,
    pub metrics: RunMetrics,
}

impl RunOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.params.clone(),
            self.metrics.stage,
            self.metrics.steps.len() as u64,
            self.metrics.seed,
        )
    }
}

/// Splits the training images (id order) into `(train, validation)`; the
/// validation images are the last `val_images`.
pub fn split_validation(corpus: &Corpus, val_images: usize) -> Result<(Vec<String>, Vec<String>), RunError> {
    let mut ids: Vec<String> = corpus.train_images().iter().map(|r| r.id.clone()).collect();
    if val_images >= ids.len() {
        return Err(RunError::Config(format!(
            "val_images ({val_images}) must leave training images (have {})",
            ids.len()
        )));
    }
    let val = ids.split_off(ids.len() - val_images);
    Ok((ids, val))
}

/// Records with a positive and no negatives, for in-batch training.
pub fn positive_records(corpus: &Corpus, image_ids: &[String]) -> Result<Vec<MinedRecord>, RunError> {
    image_ids
        .iter()
        .map(|id| {
            Ok(MinedRecord {
                image_id: id.clone(),
                pos: corpus.pretrain_caption(id)?.id.clone(),
                neg: Vec::new(),
                pos_score: 0.0,
                neg_scores: Vec::new(),
            })
        })
        .collect()
}

/// Loss graph of one stage-1 / bootstrap step; gradients reach both sides.
pub fn contrastive_step_graph(
    params: &EncoderParams<f64>,
    queries: &[TokenSeq],
    candidates: &[TokenSeq],
    layout: &BatchLayout,
) -> Result<(Graph64, NodeId), RunError> {
    let mut g = Graph::new();
    let mut enc = BoundEncoder::bind(&mut g, params, true)?;
    let q = enc.encode_batch(&mut g, queries, true)?;
    let c = enc.encode_batch(&mut g, candidates, true)?;
    let loss = loss_with_stop_gradient(&mut g, q, c, enc.log_tau(), layout, true)?;
    Ok((g, loss))
}

/// Loss graph of one stage-2 step. Candidate embeddings enter as constants.
pub fn finetune_step_graph(
    params: &EncoderParams<f64>,
    queries: &[TokenSeq],
    candidates: Tensor<f64>,
    layout: &BatchLayout,
) -> Result<(Graph64, NodeId), RunError> {
    let mut g = Graph::new();
    let mut enc = BoundEncoder::bind(&mut g, params, true)?;
    let q = enc.encode_batch(&mut g, queries, true)?;
    let c = g.constant(candidates);
    let loss = loss_with_stop_gradient(&mut g, q, c, enc.log_tau(), layout, false)?;
    Ok((g, loss))
}

/// Fraction of rows of `q · cᵀ` whose argmax (lowest index on ties) is `pos[i]`.
pub fn argmax_accuracy(q: &Tensor<f64>, c: &Tensor<f64>, pos: &[usize]) -> Result<f64, RunError> {
    let s = q.matmul_nt(c)?;
    let hits = pos
        .iter()
        .enumerate()
        .filter(|&(i, &p)| {
            let row = s.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == p
        })
        .count();
    Ok(hits as f64 / pos.len() as f64)
}

/// Adapter-free embeddings of a fixed caption set, keyed by id.
#[derive(Debug, Clone)]
pub struct CandidateTable {
    index: BTreeMap<String, usize>,
    emb: Tensor<f64>,
}

impl CandidateTable {
    pub fn build(params: &EncoderParams<f64>, corpus: &Corpus, caption_ids: &[String]) -> Result<Self, RunError> {
        let seqs = caption_ids
            .iter()
            .map(|id| Ok(corpus.caption(id)?.tokens.clone()))
            .collect::<Result<Vec<_>, CorpusError>>()?;
        let emb = embed(params, &seqs, false, EMBED_BATCH)?;
        let index = caption_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self { index, emb })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.emb.row(i))
    }

    /// Stacks the rows of `ids` into `[ids.len() × d]`.
    pub fn rows(&self, ids: &[String]) -> Result<Tensor<f64>, RunError> {
        let d = self.emb.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            let row = self.row(id).ok_or_else(|| CorpusError::UnknownId {
                kind: "caption",
                id: id.clone(),
            })?;
            data.extend_from_slice(row);
        }
        Ok(Tensor::matrix(ids.len(), d, data)?)
    }
}

/// The stage-2 backbone: stage-1 adapter fused into the base, rounded to
/// checkpoint precision so that a saved stage-2 checkpoint reproduces it
/// exactly, with nothing frozen yet.
pub fn stage2_base(stage1: &EncoderParams<f64>) -> Result<EncoderParams<f64>, RunError> {
    let fused = if stage1.lora.is_some() {
        stage1.lora_fuse()?
    } else {
        stage1.clone()
    };
    let mut base = fused.cast::<f32>().cast::<f64>();
    base.unfreeze_all();
    Ok(base)
}

fn resolve_encoder(config: &TrainConfig, corpus: &Corpus) -> EncoderConfig {
    config
        .encoder
        .clone()
        .unwrap_or_else(|| EncoderConfig::desk(corpus.vocab.size, corpus.config.query_len()))
}

fn expect_stage(config: &TrainConfig, stage: Stage) -> Result<(), RunError> {
    config.validate()?;
    if config.stage != stage {
        return Err(RunError::Config(format!("config is for stage {}, not {stage}", config.stage)));
    }
    Ok(())
}

fn contrastive_geometry(config: &TrainConfig) -> (usize, usize) {
    match config.batch {
        BatchGeometry::Contrastive { n, m } => (n, m),
        BatchGeometry::Grouped { .. } => unreachable!("validated"),
    }
}

/// In-batch validation: every validation image against the pretraining
/// captions of all validation images.
fn contrastive_val(params: &EncoderParams<f64>, corpus: &Corpus, val_ids: &[String]) -> Result<Option<f64>, RunError> {
    if val_ids.is_empty() {
        return Ok(None);
    }
    let mut queries = Vec::with_capacity(val_ids.len());
    let mut cands = Vec::with_capacity(val_ids.len());
    for id in val_ids {
        queries.push(corpus.image(id)?.tokens.clone());
        cands.push(corpus.pretrain_caption(id)?.tokens.clone());
    }
    let q = embed(params, &queries, true, EMBED_BATCH)?;
    let c = embed(params, &cands, true, EMBED_BATCH)?;
    let pos: Vec<usize> = (0..val_ids.len()).collect();
    Ok(Some(argmax_accuracy(&q, &c, &pos)?))
}

/// Fixed stage-2 validation set: `group_size` aspects per validation image,
/// phrased with the held-out paraphrase, against all of their captions.
struct FinetuneVal {
    queries: Vec<TokenSeq>,
    candidates: Tensor<f64>,
    pos: Vec<usize>,
}

impl FinetuneVal {
    fn build(
        corpus: &Corpus,
        val_ids: &[String],
        group_size: usize,
        max_seq: usize,
        seed: u64,
        table: &CandidateTable,
    ) -> Result<Option<Self>, RunError> {
        if val_ids.is_empty() {
            return Ok(None);
        }
        let mut rng = seeded(seed);
        let held_out = corpus.config.held_out_paraphrase();
        let (mut queries, mut cand_ids, mut pos) = (Vec::new(), Vec::new(), Vec::new());
        for id in val_ids {
            let image = corpus.image(id)?;
            for a in sample(&mut rng, corpus.config.n_aspects, group_size) {
                let ins = corpus.instruction_for(id, a, held_out)?;
                queries.push(assemble_query(&image.tokens, Some(&ins.tokens), max_seq)?);
                pos.push(cand_ids.len());
                cand_ids.push(corpus.caption_for(id, a)?.id.clone());
            }
        }
        Ok(Some(Self {
            queries,
            candidates: table.rows(&cand_ids)?,
            pos,
        }))
    }

    fn accuracy(&self, params: &EncoderParams<f64>) -> Result<f64, RunError> {
        let q = embed(params, &self.queries, true, EMBED_BATCH)?;
        argmax_accuracy(&q, &self.candidates, &self.pos)
    }
}

/// Shared optimization loop. `step_graph` builds the loss for the next
/// batch; `validate` scores the current parameters.
fn train_loop(
    params: &mut EncoderParams<f64>,
    config: &TrainConfig,
    mut step_graph: impl FnMut(&EncoderParams<f64>) -> Result<(Graph64, NodeId), RunError>,
    mut validate: impl FnMut(&EncoderParams<f64>) -> Result<Option<f64>, RunError>,
) -> Result<RunMetrics, RunError> {
    let mut metrics = RunMetrics::new(config.stage, config.hash(), config.seed);
    let mut opt = AdamW::new(config.betas, config.weight_decay);
    let log_floor = TAU_FLOOR.ln();
    for step in 0..config.steps {
        let tau = params.tau();
        let (g, loss) = step_graph(params)?;
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let grad_norm = grads.global_norm();
        let lr = lr_schedule(step, config.steps, config.lr, config.warmup_frac);
        let outcome = if loss_value.is_finite() {
            opt.step(params, &grads, lr)
        } else {
            StepOutcome::Diverged
        };
        let mut record = StepMetrics {
            step,
            loss: loss_value,
            tau,
            grad_norm,
            val_acc: None,
        };
        if outcome == StepOutcome::Diverged {
            metrics.diverged = true;
            metrics.steps.push(record);
            return Err(RunError::Diverged {
                step,
                metrics: Box::new(metrics),
            });
        }
        if params.log_tau.item() < log_floor {
            log::warn!("step {step}: τ fell below {TAU_FLOOR}; clamped");
            params.set_tau(TAU_FLOOR);
            metrics.diverged = true;
            metrics.tau_floor_hits.push(step);
        }
        let last = step + 1 == config.steps;
        if last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0) {
            record.val_acc = validate(params)?;
        }
        log::debug!(
            "stage {} step {step}: loss {loss_value:.5} tau {tau:.5} |g| {grad_norm:.4} val {:?}",
            config.stage,
            record.val_acc
        );
        metrics.steps.push(record);
    }
    metrics.final_val_acc = match metrics.steps.last() {
        Some(last) => last.val_acc,
        None => validate(params)?,
    };
    Ok(metrics)
}

/// Bootstrap mining model: fresh backbone, every weight trained, `M == N`
/// so each query's negatives are the other queries' positives.
pub fn run_bootstrap(config: &TrainConfig, corpus: &Corpus) -> Result<RunOutput, RunError> {
    expect_stage(config, Stage::Bootstrap)?;
    let (n, _) = contrastive_geometry(config);
    let mut params = EncoderParams::init(&resolve_encoder(config, corpus), config.seed)?;
    params.set_tau(config.tau_init.expect("validated"));
    let (train_ids, val_ids) = split_validation(corpus, config.val_images)?;
    let records = positive_records(corpus, &train_ids)?;
    let mut batches = build_pretrain_batches(corpus, &records, n, n, derive_seed(config.seed, BATCH_STREAM))?;
    let metrics = train_loop(
        &mut params,
        config,
        |p| {
            let b = batches.next_batch()?;
            contrastive_step_graph(p, &b.queries, &b.candidates, &b.layout)
        },
        |p| contrastive_val(p, corpus, &val_ids),
    )?;
    Ok(RunOutput { params, metrics })
}

/// Stage 1: fresh backbone plus a LoRA adapter, trained on mined batches.
/// The projection head and τ always train; base weights train only with
/// `train_base_weights`.
pub fn run_stage1(config: &TrainConfig, corpus: &Corpus, mined: &MinedDataset) -> Result<RunOutput, RunError> {
    expect_stage(config, Stage::Pretrain)?;
    let (n, m) = contrastive_geometry(config);
    let mut params = EncoderParams::init(&resolve_encoder(config, corpus), config.seed)?;
    params.set_tau(config.tau_init.expect("validated"));
    if !config.train_base_weights {
        params.freeze_base();
        for name in ["head.a", "head.b", "log_tau"] {
            params.frozen.remove(name);
        }
    }
    params.attach_lora(config.lora_rank, config.lora_alpha, derive_seed(config.seed, LORA_STREAM))?;

    let (train_ids, val_ids) = split_validation(corpus, config.val_images)?;
    let train_set: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let val_set: BTreeSet<&str> = val_ids.iter().map(String::as_str).collect();
    let mut records = Vec::with_capacity(train_ids.len());
    for r in &mined.records {
        if train_set.contains(r.image_id.as_str()) {
            records.push(r.clone());
        } else if !val_set.contains(r.image_id.as_str()) {
            return Err(RunError::Config(format!(
                "mined record for {} is not a training image of this corpus",
                r.image_id
            )));
        }
    }
    let mut batches = build_pretrain_batches(corpus, &records, n, m, derive_seed(config.seed, BATCH_STREAM))?;
    let metrics = train_loop(
        &mut params,
        config,
        |p| {
            let b = batches.next_batch()?;
            contrastive_step_graph(p, &b.queries, &b.candidates, &b.layout)
        },
        |p| contrastive_val(p, corpus, &val_ids),
    )?;
    Ok(RunOutput { params, metrics })
}

/// Stage 2: fuse the stage-1 adapter, freeze everything (head and τ
/// included), attach a new adapter and train it on instruction queries
/// against candidates embedded once by the frozen backbone.
pub fn run_stage2(config: &TrainConfig, corpus: &Corpus, stage1: &Checkpoint) -> Result<RunOutput, RunError> {
    expect_stage(config, Stage::Finetune)?;
    if stage1.meta.stage != Stage::Pretrain {
        return Err(RunError::StageMismatch {
            expected: Stage::Pretrain,
            found: stage1.meta.stage,
        });
    }
    let BatchGeometry::Grouped { images, group_size } = config.batch else {
        unreachable!("validated")
    };
    let base = stage2_base(&stage1.params)?;
    let mut params = base.clone();
    params.freeze_base();
    params.attach_lora(config.lora_rank, config.lora_alpha, derive_seed(config.seed, LORA_STREAM))?;
    let max_seq = params.config.max_seq;

    let caption_ids: Vec<String> = corpus.train_captions().iter().map(|c| c.id.clone()).collect();
    let table = CandidateTable::build(&base, corpus, &caption_ids)?;
    let (train_ids, val_ids) = split_validation(corpus, config.val_images)?;
    let val = FinetuneVal::build(
        corpus,
        &val_ids,
        group_size,
        max_seq,
        derive_seed(config.seed, VAL_STREAM),
        &table,
    )?;
    let mut batches = build_finetune_batches_over(
        corpus,
        train_ids,
        images,
        group_size,
        max_seq,
        derive_seed(config.seed, BATCH_STREAM),
    )?;
    let metrics = train_loop(
        &mut params,
        config,
        |p| {
            let b = batches.next_batch()?;
            finetune_step_graph(p, &b.queries, table.rows(&b.candidate_ids)?, &b.layout)
        },
        |p| val.as_ref().map(|v| v.accuracy(p)).transpose(),
    )?;
    Ok(RunOutput { params, metrics })
}
