//! Retrieval recall, template classification and the instruction-controlled
//! benchmark, each producing an [`EvalReport`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::{check_bench_disjoint, BenchRecord, Corpus, CorpusError, ImageRecord};
use crate::encoder::{assemble_query, embed, EncoderError, TokenSeq};
use crate::jsonl::{write_jsonl, JsonlError};
use crate::tensor::{Tensor, TensorError};

const EMBED_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {k} exceeds the {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("query {query}: ground-truth index {gt} out of range for {n} candidates")]
    GroundTruth { query: usize, gt: usize, n: usize },
    #[error("{queries} queries but {gt} ground-truth entries")]
    GroundTruthCount { queries: usize, gt: usize },
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("invalid benchmark: {0}")]
    Bench(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        }
    }
}

/// Rank of one query's correct candidate (0 = top).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query: String,
    pub positive: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub ckpt_hash: String,
    pub corpus_hash: String,
    pub n_queries: usize,
    #[serde(skip)]
    pub ranks: Vec<QueryRank>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Writes `report.json` and, when ranks were kept, `ranks.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io(&path))?;
        if !self.ranks.is_empty() {
            write_jsonl(&dir.join("ranks.jsonl"), &self.ranks)?;
        }
        Ok(())
    }
}

pub fn recall_key(k: usize) -> String {
    format!("R@{k}")
}

/// 0-based rank of each query's correct candidate in `s` (`queries × candidates`).
/// Equal scores rank the lower candidate index first.
pub fn gt_ranks(s: &Tensor<f64>, gt: &[usize]) -> Result<Vec<usize>, EvalError> {
    let [nq, nc] = s.shape()[..] else {
        return Err(TensorError::Invalid {
            op: "gt_ranks",
            detail: format!("expected a score matrix, got shape {:?}", s.shape()),
        }
        .into());
    };
    if gt.len() != nq {
        return Err(EvalError::GroundTruthCount { queries: nq, gt: gt.len() });
    }
    (0..nq)
        .map(|i| {
            let g = gt[i];
            if g >= nc {
                return Err(EvalError::GroundTruth { query: i, gt: g, n: nc });
            }
            let row = s.row(i);
            let target = row[g];
            Ok(row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < g))
                .count())
        })
        .collect()
}

/// Fraction of queries whose correct candidate ranks in the top `k`, per `k`.
pub fn recall_at_k(s: &Tensor<f64>, gt: &[usize], ks: &[usize]) -> Result<BTreeMap<String, f64>, EvalError> {
    let ranks = gt_ranks(s, gt)?;
    recall_from_ranks(&ranks, s.shape()[1], ks)
}

fn recall_from_ranks(ranks: &[usize], n_candidates: usize, ks: &[usize]) -> Result<BTreeMap<String, f64>, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty("no queries"));
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        if k == 0 {
            return Err(EvalError::ZeroK);
        }
        if k > n_candidates {
            return Err(EvalError::KTooLarge { k, n: n_candidates });
        }
        let hits = ranks.iter().filter(|&&r| r < k).count();
        out.insert(recall_key(k), hits as f64 / ranks.len() as f64);
    }
    Ok(out)
}

/// Candidate texts are embedded by the frozen stage-1 model once a
/// checkpoint carries a stage-2 adapter; otherwise both sides share it.
fn candidate_lora(ckpt: &Checkpoint) -> bool {
    ckpt.params.lora.is_some() && ckpt.meta.stage != Stage::Finetune
}

fn query_lora(ckpt: &Checkpoint) -> bool {
    ckpt.params.lora.is_some()
}

fn embed_seqs(ckpt: &Checkpoint, seqs: &[TokenSeq], lora: bool) -> Result<Tensor<f64>, EvalError> {
    Ok(embed(&ckpt.params, seqs, lora, EMBED_BATCH)?)
}

/// Instruction-free retrieval between `images` and each image's pretraining
/// caption, the one caption per image that plays the paired-text role.
pub fn eval_retrieval(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    images: &[&ImageRecord],
    direction: Direction,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::Empty("no images"));
    }
    let captions = images
        .iter()
        .map(|img| corpus.pretrain_caption(&img.id))
        .collect::<Result<Vec<_>, _>>()?;
    let image_seqs: Vec<TokenSeq> = images.iter().map(|r| r.tokens.clone()).collect();
    let caption_seqs: Vec<TokenSeq> = captions.iter().map(|r| r.tokens.clone()).collect();
    let ie = embed_seqs(ckpt, &image_seqs, query_lora(ckpt))?;
    let ce = embed_seqs(ckpt, &caption_seqs, candidate_lora(ckpt))?;
    let (s, query_ids, cand_ids) = match direction {
        Direction::ImageToText => (
            ie.matmul_nt(&ce)?,
            images.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
            captions.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
        ),
        Direction::TextToImage => (
            ce.matmul_nt(&ie)?,
            captions.iter().map(|r| r.id.clone()).collect(),
            images.iter().map(|r| r.id.clone()).collect(),
        ),
    };
    let gt: Vec<usize> = (0..images.len()).collect();
    let ranks = gt_ranks(&s, &gt)?;
    Ok(EvalReport {
        task: format!("retrieval_{}", direction.name()),
        metrics: recall_from_ranks(&ranks, cand_ids.len(), ks)?,
        ckpt_hash: ckpt.hash(),
        corpus_hash: corpus.hash(),
        n_queries: ranks.len(),
        ranks: rank_dump(&query_ids, &cand_ids, &gt, &ranks),
    })
}

fn rank_dump(query_ids: &[String], cand_ids: &[String], gt: &[usize], ranks: &[usize]) -> Vec<QueryRank> {
    query_ids
        .iter()
        .zip(gt)
        .zip(ranks)
        .map(|((q, &g), &rank)| QueryRank {
            query: q.clone(),
            positive: cand_ids[g].clone(),
            rank,
        })
        .collect()
}

/// Label-by-prompt classification task: `targets[i]` indexes `labels` for `images[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTask {
    pub names: Vec<String>,
    pub labels: Vec<TokenSeq>,
    pub image_ids: Vec<String>,
    pub images: Vec<TokenSeq>,
    pub targets: Vec<usize>,
}

impl ClassificationTask {
    /// Classify `images` by the first value token of `aspect`.
    pub fn by_aspect(corpus: &Corpus, aspect: usize, images: &[&ImageRecord]) -> Result<Self, EvalError> {
        let (names, labels, targets) = corpus.classification_task(aspect, images)?;
        Ok(Self {
            names,
            labels,
            image_ids: images.iter().map(|r| r.id.clone()).collect(),
            images: images.iter().map(|r| r.tokens.clone()).collect(),
            targets,
        })
    }
}

pub const CLASSIFY_TEMPLATE: &str = "A photo of a {label}.";

/// Each label is rendered through `template`; the prediction is the most
/// similar prompt, lower label index on ties.
pub fn eval_classification(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    task: &ClassificationTask,
    template: &str,
) -> Result<EvalReport, EvalError> {
    if !template.contains("{label}") {
        return Err(CorpusError::MissingPlaceholder(template.into()).into());
    }
    if task.labels.is_empty() {
        return Err(EvalError::Empty("no labels"));
    }
    if task.images.is_empty() {
        return Err(EvalError::Empty("no images"));
    }
    let prompts = task
        .labels
        .iter()
        .map(|l| corpus.render_template(template, l))
        .collect::<Result<Vec<_>, _>>()?;
    let ie = embed_seqs(ckpt, &task.images, query_lora(ckpt))?;
    let pe = embed_seqs(ckpt, &prompts, candidate_lora(ckpt))?;
    let ranks = gt_ranks(&ie.matmul_nt(&pe)?, &task.targets)?;
    let correct = ranks.iter().filter(|&&r| r == 0).count();
    Ok(EvalReport {
        task: "classification".into(),
        metrics: BTreeMap::from([("accuracy".to_string(), correct as f64 / ranks.len() as f64)]),
        ckpt_hash: ckpt.hash(),
        corpus_hash: corpus.hash(),
        n_queries: ranks.len(),
        ranks: rank_dump(&task.image_ids, &task.names, &task.targets, &ranks),
    })
}

pub const WITHIN_IMAGE_R1: &str = "within_image_R@1";

/// Checks that every record is self-consistent, unique and disjoint from training.
pub fn validate_bench(corpus: &Corpus, bench: &[BenchRecord]) -> Result<(), EvalError> {
    if bench.is_empty() {
        return Err(EvalError::Empty("empty benchmark"));
    }
    check_bench_disjoint(corpus, bench)?;
    let mut seen_captions = BTreeSet::new();
    let mut seen_instructions = BTreeSet::new();
    for r in bench {
        let cap = corpus.caption(&r.positive_caption_id)?;
        let ins = corpus.instruction(&r.instruction_id)?;
        if cap.image_id != r.image_id || ins.image_id != r.image_id {
            return Err(EvalError::Bench(format!("record for {} mixes images", r.image_id)));
        }
        if cap.aspect != ins.aspect {
            return Err(EvalError::Bench(format!(
                "instruction {} asks for aspect {}, caption {} is aspect {}",
                ins.id, ins.aspect, cap.id, cap.aspect
            )));
        }
        if !seen_captions.insert(&cap.tokens) {
            return Err(EvalError::Bench(format!("duplicate caption {}", cap.id)));
        }
        if !seen_instructions.insert(&ins.id) {
            return Err(EvalError::Bench(format!("duplicate instruction {}", ins.id)));
        }
    }
    Ok(())
}

/// Instruction-controlled retrieval over the benchmark.
///
/// Global metrics rank every benchmark caption; `within_image_R@1` ranks
/// only the query image's own captions. With `use_instructions = false` the
/// query is the image alone, the instruction-blind baseline.
pub fn eval_ctrlbench(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    bench: &[BenchRecord],
    use_instructions: bool,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    validate_bench(corpus, bench)?;
    let pool: Vec<String> = bench
        .iter()
        .map(|r| r.positive_caption_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pool_index: BTreeMap<&str, usize> = pool.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let pool_seqs = pool
        .iter()
        .map(|id| corpus.caption(id).map(|c| c.tokens.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let ce = embed_seqs(ckpt, &pool_seqs, candidate_lora(ckpt))?;

    let max_seq = ckpt.params.config.max_seq;
    let queries = bench
        .iter()
        .map(|r| {
            let img = corpus.image(&r.image_id)?;
            let ins = corpus.instruction(&r.instruction_id)?;
            let instr = use_instructions.then_some(&ins.tokens);
            Ok(assemble_query(&img.tokens, instr, max_seq)?)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let qe = embed_seqs(ckpt, &queries, query_lora(ckpt))?;
    let s = qe.matmul_nt(&ce)?;
    let gt: Vec<usize> = bench.iter().map(|r| pool_index[r.positive_caption_id.as_str()]).collect();
    let ranks = gt_ranks(&s, &gt)?;
    let mut metrics = recall_from_ranks(&ranks, pool.len(), ks)?;

    // Group members by image; ties inside a group also break by pool index.
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in bench {
        groups.entry(&r.image_id).or_default().push(pool_index[r.positive_caption_id.as_str()]);
    }
    let within_hits = bench
        .iter()
        .zip(&gt)
        .enumerate()
        .filter(|&(i, (r, &g))| {
            let row = s.row(i);
            groups[r.image_id.as_str()]
                .iter()
                .all(|&j| j == g || row[j] < row[g] || (row[j] == row[g] && g < j))
        })
        .count();
    metrics.insert(WITHIN_IMAGE_R1.into(), within_hits as f64 / bench.len() as f64);

    let mode = if use_instructions { "instructed" } else { "blind" };
    let query_ids: Vec<String> = bench.iter().map(|r| r.instruction_id.clone()).collect();
    Ok(EvalReport {
        task: format!("ctrlbench_{mode}"),
        metrics,
        ckpt_hash: ckpt.hash(),
        corpus_hash: corpus.hash(),
        n_queries: bench.len(),
        ranks: rank_dump(&query_ids, &pool, &gt, &ranks),
    })
}

/// Binomial standard error of a rate `p` over `n` trials.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
