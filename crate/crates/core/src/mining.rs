//! Hard-negative mining with a bootstrap model.
//!
//! 1. A bootstrap model (trained with in-batch negatives only) embeds every
//!    training image and caption.
//! 2. The full image × caption similarity table is computed in row chunks.
//! 3. For each image, captions scoring at most `ε ·` the positive's score are
//!    eligible; the `window` highest-scoring eligible captions form the pool
//!    (ties broken by ascending caption id) and `k` are drawn uniformly
//!    without replacement.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::encoder::{embed, EncoderError, EncoderParams, TokenSeq};
use crate::jsonl::{read_jsonl, to_jsonl, write_jsonl, JsonlError};
use crate::objective::ObjectiveError;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("{}only {eligible} eligible negatives, {k} requested", image_id.as_ref().map(|i| format!("image {i}: ")).unwrap_or_default())]
    InsufficientNegatives {
        image_id: Option<String>,
        eligible: usize,
        k: usize,
    },
    #[error("positive index {0} is outside the similarity row")]
    PositiveOutOfRange(usize),
    #[error("chunk size must be >= 1")]
    ZeroChunk,
    #[error("line {line}: {detail}")]
    Audit { line: usize, detail: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub epsilon: f64,
    pub k: usize,
    pub window: usize,
    pub seed: u64,
}

impl MiningConfig {
    /// ε = 0.95, k = 7, window = 100.
    pub fn paper(seed: u64) -> Self {
        Self {
            epsilon: 0.95,
            k: 7,
            window: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MiningError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(MiningError::InvalidConfig(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.k == 0 {
            return Err(MiningError::InvalidConfig("k must be >= 1".into()));
        }
        if self.window < self.k {
            return Err(MiningError::InvalidConfig(format!("window {} < k {}", self.window, self.k)));
        }
        Ok(())
    }
}

/// Embeddings of every listed image and caption; similarity rows are
/// computed on demand so memory stays linear in corpus size.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub image_ids: Vec<String>,
    pub caption_ids: Vec<String>,
    /// `[images × d]`
    pub image_emb: Tensor<f64>,
    /// `[captions × d]`
    pub caption_emb: Tensor<f64>,
}

impl SimilarityTable {
    /// Scores of image `i` against every caption.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let q = self.image_emb.row(i);
        (0..self.caption_ids.len())
            .map(|j| q.iter().zip(self.caption_emb.row(j)).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.image_emb.row(i).iter().zip(self.caption_emb.row(j)).map(|(a, b)| a * b).sum()
    }
}

/// Embeds the captions once and the images `chunk_size` rows at a time.
pub fn score_corpus(
    params: &EncoderParams<f64>,
    corpus: &Corpus,
    image_ids: &[String],
    caption_ids: &[String],
    chunk_size: usize,
) -> Result<SimilarityTable, MiningError> {
    if chunk_size == 0 {
        return Err(MiningError::ZeroChunk);
    }
    let images: Vec<TokenSeq> = image_ids
        .iter()
        .map(|id| corpus.image(id).map(|r| r.tokens.clone()))
        .collect::<Result<_, _>>()?;
    let captions: Vec<TokenSeq> = caption_ids
        .iter()
        .map(|id| corpus.caption(id).map(|r| r.tokens.clone()))
        .collect::<Result<_, _>>()?;
    Ok(SimilarityTable {
        image_ids: image_ids.to_vec(),
        caption_ids: caption_ids.to_vec(),
        image_emb: embed(params, &images, true, chunk_size)?,
        caption_emb: embed(params, &captions, true, 256)?,
    })
}

/// Eligible candidates of `row` ranked by descending score, ascending index.
pub fn eligible_ranked(row: &[f64], positive: usize, epsilon: f64) -> Vec<usize> {
    eligible_top(row, positive, epsilon, usize::MAX).1
}

/// Number of eligible candidates, and the first `limit` of them in
/// [`eligible_ranked`] order.
pub fn eligible_top(row: &[f64], positive: usize, epsilon: f64, limit: usize) -> (usize, Vec<usize>) {
    let threshold = epsilon * row[positive];
    let mut idx: Vec<usize> = (0..row.len())
        .filter(|&j| j != positive && row[j] <= threshold)
        .collect();
    let count = idx.len();
    let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if limit < idx.len() {
        idx.select_nth_unstable_by(limit, order);
        idx.truncate(limit);
    }
    idx.sort_by(order);
    (count, idx)
}

/// Draws `k` negatives for one similarity row. Indices are returned in
/// pool order (highest score first).
pub fn mine(row: &[f64], positive: usize, config: &MiningConfig) -> Result<Vec<usize>, MiningError> {
    mine_with(row, positive, config, false)
}

/// As [`mine`]; with `allow_fewer`, a short eligible set is returned whole
/// instead of failing.
pub fn mine_with(row: &[f64], positive: usize, config: &MiningConfig, allow_fewer: bool) -> Result<Vec<usize>, MiningError> {
    config.validate()?;
    if positive >= row.len() {
        return Err(MiningError::PositiveOutOfRange(positive));
    }
    let (eligible, pool) = eligible_top(row, positive, config.epsilon, config.window);
    if eligible < config.k && !allow_fewer {
        return Err(MiningError::InsufficientNegatives {
            image_id: None,
            eligible,
            k: config.k,
        });
    }
    let k = config.k.min(pool.len());
    let mut picks = sample(&mut seeded(config.seed), pool.len(), k).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|p| pool[p]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinedRecord {
    pub image_id: String,
    pub pos: String,
    pub neg: Vec<String>,
    pub pos_score: f64,
    pub neg_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedDataset {
    pub records: Vec<MinedRecord>,
}

impl MinedDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_jsonl(&self.records)
    }

    pub fn write(&self, path: &Path) -> Result<(), MiningError> {
        Ok(write_jsonl(path, &self.records)?)
    }

    pub fn read(path: &Path) -> Result<Self, MiningError> {
        Ok(Self {
            records: read_jsonl(path)?.into_iter().map(|(_, r)| r).collect(),
        })
    }

    /// Smallest negative count over all records.
    pub fn min_negatives(&self) -> usize {
        self.records.iter().map(|r| r.neg.len()).min().unwrap_or(0)
    }
}

/// Every training image against every training caption (captions in id order).
pub fn training_table(params: &EncoderParams<f64>, corpus: &Corpus) -> Result<SimilarityTable, MiningError> {
    let image_ids: Vec<String> = corpus.train_images().iter().map(|r| r.id.clone()).collect();
    let mut caption_ids: Vec<String> = corpus.train_captions().iter().map(|r| r.id.clone()).collect();
    caption_ids.sort();
    score_corpus(params, corpus, &image_ids, &caption_ids, 64)
}

/// One record per training image. The positive is the image's caption for
/// [`Corpus::pretrain_aspect`]; candidates are all training captions.
pub fn build_mined_dataset(
    params: &EncoderParams<f64>,
    corpus: &Corpus,
    config: &MiningConfig,
    allow_fewer: bool,
) -> Result<(MinedDataset, SimilarityTable), MiningError> {
    config.validate()?;
    let table = training_table(params, corpus)?;
    let (image_ids, caption_ids) = (&table.image_ids, &table.caption_ids);
    let mut records = Vec::with_capacity(image_ids.len());
    for (i, image_id) in image_ids.iter().enumerate() {
        let pos_id = &corpus.pretrain_caption(image_id)?.id;
        let pos = caption_ids.binary_search(pos_id).expect("positive is a training caption");
        let row = table.row(i);
        let cfg = MiningConfig {
            seed: derive_seed(config.seed, i as u64),
            ..config.clone()
        };
        let negs = mine_with(&row, pos, &cfg, allow_fewer).map_err(|e| match e {
            MiningError::InsufficientNegatives { eligible, k, .. } => MiningError::InsufficientNegatives {
                image_id: Some(image_id.clone()),
                eligible,
                k,
            },
            other => other,
        })?;
        records.push(MinedRecord {
            image_id: image_id.clone(),
            pos: pos_id.clone(),
            neg: negs.iter().map(|&j| caption_ids[j].clone()).collect(),
            pos_score: row[pos],
            neg_scores: negs.iter().map(|&j| row[j]).collect(),
        });
    }
    Ok((MinedDataset { records }, table))
}

/// Same record layout as a mined dataset, but the `k` negatives of each
/// image are drawn uniformly from all other captions in `table`.
pub fn build_random_dataset(
    corpus: &Corpus,
    table: &SimilarityTable,
    k: usize,
    seed: u64,
) -> Result<MinedDataset, MiningError> {
    let mut records = Vec::with_capacity(table.image_ids.len());
    for (i, image_id) in table.image_ids.iter().enumerate() {
        let pos_id = &corpus.pretrain_caption(image_id)?.id;
        let pos = table
            .caption_ids
            .iter()
            .position(|c| c == pos_id)
            .ok_or_else(|| CorpusError::UnknownId {
                kind: "caption",
                id: pos_id.clone(),
            })?;
        let others = table.caption_ids.len() - 1;
        if others < k {
            return Err(MiningError::InsufficientNegatives {
                image_id: Some(image_id.clone()),
                eligible: others,
                k,
            });
        }
        let mut picks = sample(&mut seeded(derive_seed(seed, i as u64)), others, k).into_vec();
        picks.sort_unstable();
        let negs: Vec<usize> = picks.into_iter().map(|j| if j >= pos { j + 1 } else { j }).collect();
        records.push(MinedRecord {
            image_id: image_id.clone(),
            pos: pos_id.clone(),
            neg: negs.iter().map(|&j| table.caption_ids[j].clone()).collect(),
            pos_score: table.score(i, pos),
            neg_scores: negs.iter().map(|&j| table.score(i, j)).collect(),
        });
    }
    Ok(MinedDataset { records })
}

/// Checks everything that can be checked from the mined file alone:
/// threshold soundness, negative count, no self-negatives, no duplicates.
pub fn audit(dataset: &MinedDataset, config: &MiningConfig, allow_fewer: bool) -> Result<(), MiningError> {
    let fail = |line: usize, detail: String| Err(MiningError::Audit { line, detail });
    for (i, r) in dataset.records.iter().enumerate() {
        let line = i + 1;
        if r.neg.len() != r.neg_scores.len() {
            return fail(line, "neg and neg_scores lengths differ".into());
        }
        if r.neg.len() > config.k || (!allow_fewer && r.neg.len() != config.k) {
            return fail(line, format!("{} negatives, expected {}", r.neg.len(), config.k));
        }
        let distinct: BTreeSet<&String> = r.neg.iter().collect();
        if distinct.len() != r.neg.len() {
            return fail(line, "duplicate negative".into());
        }
        if distinct.contains(&r.pos) {
            return fail(line, "positive listed as its own negative".into());
        }
        for (id, &s) in r.neg.iter().zip(&r.neg_scores) {
            if !(s <= config.epsilon * r.pos_score) {
                return fail(line, format!("negative {id} scores {s} > {} * {}", config.epsilon, r.pos_score));
            }
        }
    }
    Ok(())
}

/// Window soundness against the full table: every selected negative scores
/// at least as high as the `(window+1)`-th eligible caption.
pub fn audit_window(dataset: &MinedDataset, table: &SimilarityTable, config: &MiningConfig) -> Result<(), MiningError> {
    for (i, r) in dataset.records.iter().enumerate() {
        let row_idx = table
            .image_ids
            .iter()
            .position(|id| *id == r.image_id)
            .ok_or_else(|| MiningError::Audit {
                line: i + 1,
                detail: format!("image {} missing from table", r.image_id),
            })?;
        let row = table.row(row_idx);
        let pos = table
            .caption_ids
            .iter()
            .position(|id| *id == r.pos)
            .ok_or_else(|| MiningError::Audit {
                line: i + 1,
                detail: format!("caption {} missing from table", r.pos),
            })?;
        let (_, ranked) = eligible_top(&row, pos, config.epsilon, config.window + 1);
        if let Some(&cut) = ranked.get(config.window) {
            let floor = row[cut];
            if let Some(s) = r.neg_scores.iter().find(|&&s| s < floor) {
                return Err(MiningError::Audit {
                    line: i + 1,
                    detail: format!("negative score {s} below the window floor {floor}"),
                });
            }
        }
    }
    Ok(())
}
