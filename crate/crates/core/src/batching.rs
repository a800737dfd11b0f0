//! Batch streams for both training stages.
//!
//! Stage 1 batches hold `N` image queries without instructions and `M`
//! caption candidates: the `N` positives, then each query's `M/N − 1` mined
//! negatives grouped by owner. Stage 2 batches group several instruction
//! queries of the same image, so the sibling captions of an image serve as
//! each other's negatives.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Split};
use crate::encoder::{assemble_query, EncoderError, TokenSeq};
use crate::mining::MinedRecord;
use crate::objective::{BatchLayout, ObjectiveError};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("invalid batch geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub image_ids: Vec<String>,
    pub queries: Vec<TokenSeq>,
    pub candidate_ids: Vec<String>,
    pub candidates: Vec<TokenSeq>,
    pub layout: BatchLayout,
}

/// Endless, epoch-shuffled stream of stage-1 batches.
///
/// Each epoch draws `M/N − 1` of every record's negatives without
/// replacement, then packs images greedily so that no query's positive shows
/// up as another query's negative in the same batch. An image that cannot be
/// placed is deferred to a later batch; images left over at the end of an
/// epoch (fewer than `N`) are dropped.
#[derive(Debug, Clone)]
pub struct PretrainBatches<'a> {
    corpus: &'a Corpus,
    records: Vec<&'a MinedRecord>,
    n: usize,
    m: usize,
    seed: u64,
    epoch: u64,
    pending: VecDeque<PretrainBatch>,
}

pub fn build_pretrain_batches<'a>(
    corpus: &'a Corpus,
    records: &'a [MinedRecord],
    n: usize,
    m: usize,
    seed: u64,
) -> Result<PretrainBatches<'a>, BatchError> {
    if n == 0 || m < n || !m.is_multiple_of(n) {
        return Err(BatchError::Geometry(format!("M={m} must be a positive multiple of N={n}")));
    }
    let per = m / n - 1;
    if let Some(r) = records.iter().find(|r| r.neg.len() < per) {
        return Err(BatchError::Geometry(format!(
            "M/N - 1 = {per} negatives per query, but image {} has only {}",
            r.image_id,
            r.neg.len()
        )));
    }
    if records.len() < n {
        return Err(BatchError::Geometry(format!("{} images cannot fill a batch of N={n}", records.len())));
    }
    for r in records {
        corpus.image(&r.image_id)?;
        corpus.caption(&r.pos)?;
        for c in &r.neg {
            corpus.caption(c)?;
        }
    }
    Ok(PretrainBatches {
        corpus,
        records: records.iter().collect(),
        n,
        m,
        seed,
        epoch: 0,
        pending: VecDeque::new(),
    })
}

impl PretrainBatches<'_> {
    pub fn negatives_per_query(&self) -> usize {
        self.m / self.n - 1
    }

    /// All batches of one epoch.
    pub fn epoch_batches(&self, epoch: u64) -> Result<Vec<PretrainBatch>, BatchError> {
        let mut rng = seeded(derive_seed(self.seed, epoch));
        let per = self.negatives_per_query();
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut rng);
        let mut queue: VecDeque<(usize, Vec<usize>)> = order
            .into_iter()
            .map(|i| {
                let k = self.records[i].neg.len();
                let mut pick = sample(&mut rng, k, per).into_vec();
                pick.sort_unstable();
                (i, pick)
            })
            .collect();

        let mut out = Vec::new();
        while queue.len() >= self.n {
            let mut chosen: Vec<(usize, Vec<usize>)> = Vec::with_capacity(self.n);
            let mut positives: BTreeSet<&str> = BTreeSet::new();
            let mut negatives: BTreeSet<&str> = BTreeSet::new();
            let mut deferred = VecDeque::new();
            while chosen.len() < self.n {
                let Some((i, pick)) = queue.pop_front() else { break };
                let r = self.records[i];
                let negs: Vec<&str> = pick.iter().map(|&k| r.neg[k].as_str()).collect();
                let clash = negatives.contains(r.pos.as_str())
                    || positives.contains(r.pos.as_str())
                    || negs.iter().any(|c| positives.contains(c));
                if clash {
                    deferred.push_back((i, pick));
                    continue;
                }
                positives.insert(&r.pos);
                negatives.extend(negs);
                chosen.push((i, pick));
            }
            if chosen.len() < self.n {
                break;
            }
            // deferred images go back to the front for the next batch
            while let Some(d) = deferred.pop_back() {
                queue.push_front(d);
            }
            out.push(self.assemble(&chosen)?);
        }
        Ok(out)
    }

    fn assemble(&self, chosen: &[(usize, Vec<usize>)]) -> Result<PretrainBatch, BatchError> {
        let mut image_ids = Vec::with_capacity(self.n);
        let mut queries = Vec::with_capacity(self.n);
        let mut candidate_ids = Vec::with_capacity(self.m);
        let mut owner = Vec::with_capacity(self.m);
        for (i, _) in chosen {
            let r = self.records[*i];
            image_ids.push(r.image_id.clone());
            queries.push(self.corpus.image(&r.image_id)?.tokens.clone());
            candidate_ids.push(r.pos.clone());
            owner.push(None);
        }
        for (q, (i, pick)) in chosen.iter().enumerate() {
            for &k in pick {
                candidate_ids.push(self.records[*i].neg[k].clone());
                owner.push(Some(q));
            }
        }
        let candidates = candidate_ids
            .iter()
            .map(|id| self.corpus.caption(id).map(|c| c.tokens.clone()))
            .collect::<Result<_, _>>()?;
        let layout = BatchLayout::new(self.n, self.m, (0..self.n).collect(), owner)?;
        layout.validate_pretrain()?;
        Ok(PretrainBatch {
            image_ids,
            queries,
            candidate_ids,
            candidates,
            layout,
        })
    }

    pub fn next_batch(&mut self) -> Result<PretrainBatch, BatchError> {
        while self.pending.is_empty() {
            let batches = self.epoch_batches(self.epoch)?;
            if batches.is_empty() {
                return Err(BatchError::Geometry("an epoch produced no complete batch".into()));
            }
            self.pending.extend(batches);
            self.epoch += 1;
        }
        Ok(self.pending.pop_front().expect("non-empty"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneBatch {
    pub image_ids: Vec<String>,
    pub instruction_ids: Vec<String>,
    /// `<image> SEP <instruction>` per query.
    pub queries: Vec<TokenSeq>,
    pub candidate_ids: Vec<String>,
    pub candidates: Vec<TokenSeq>,
    pub layout: BatchLayout,
    /// Candidates come from the frozen model and never receive gradients.
    pub stop_gradient: bool,
}

/// Endless stream of stage-2 batches over training images and training
/// paraphrases.
#[derive(Debug, Clone)]
pub struct FinetuneBatches<'a> {
    corpus: &'a Corpus,
    images: Vec<String>,
    images_per_batch: usize,
    group_size: usize,
    max_seq: usize,
    seed: u64,
    epoch: u64,
    pending: VecDeque<FinetuneBatch>,
}

pub fn build_finetune_batches(
    corpus: &Corpus,
    images_per_batch: usize,
    group_size: usize,
    max_seq: usize,
    seed: u64,
) -> Result<FinetuneBatches<'_>, BatchError> {
    let images = corpus.train_images().iter().map(|r| r.id.clone()).collect();
    build_finetune_batches_over(corpus, images, images_per_batch, group_size, max_seq, seed)
}

/// As [`build_finetune_batches`], restricted to the given training images.
pub fn build_finetune_batches_over(
    corpus: &Corpus,
    images: Vec<String>,
    images_per_batch: usize,
    group_size: usize,
    max_seq: usize,
    seed: u64,
) -> Result<FinetuneBatches<'_>, BatchError> {
    for id in &images {
        corpus.image(id)?;
        if corpus.is_bench_image(id) {
            return Err(BatchError::Geometry(format!("{id} is a benchmark image")));
        }
    }
    let n_aspects = corpus.config.n_aspects;
    if group_size == 0 || group_size > n_aspects {
        return Err(BatchError::Geometry(format!(
            "group_size {group_size} must be in 1..={n_aspects} (aspects per image)"
        )));
    }
    if group_size == 1 {
        log::warn!("group_size 1: batches contain no same-image negatives");
    }
    if images_per_batch == 0 || images.len() < images_per_batch {
        return Err(BatchError::Geometry(format!(
            "{} training images cannot fill {images_per_batch} images per batch",
            images.len()
        )));
    }
    if corpus.config.query_len() > max_seq {
        return Err(EncoderError::QueryOverflow {
            required: corpus.config.query_len(),
            max: max_seq,
        }
        .into());
    }
    Ok(FinetuneBatches {
        corpus,
        images,
        images_per_batch,
        group_size,
        max_seq,
        seed,
        epoch: 0,
        pending: VecDeque::new(),
    })
}

impl FinetuneBatches<'_> {
    pub fn epoch_batches(&self, epoch: u64) -> Result<Vec<FinetuneBatch>, BatchError> {
        let mut rng = seeded(derive_seed(self.seed, epoch));
        let mut order = self.images.clone();
        order.shuffle(&mut rng);
        let n_aspects = self.corpus.config.n_aspects;
        let train_paraphrases = self.corpus.config.held_out_paraphrase();
        let mut out = Vec::new();
        for chunk in order.chunks_exact(self.images_per_batch) {
            let mut b = FinetuneBatch {
                image_ids: Vec::new(),
                instruction_ids: Vec::new(),
                queries: Vec::new(),
                candidate_ids: Vec::new(),
                candidates: Vec::new(),
                layout: BatchLayout::in_batch(self.images_per_batch * self.group_size),
                stop_gradient: true,
            };
            for image_id in chunk {
                let image = self.corpus.image(image_id)?;
                let aspects = sample(&mut rng, n_aspects, self.group_size).into_vec();
                for a in aspects {
                    let p = sample(&mut rng, train_paraphrases, 1).index(0);
                    let ins = self.corpus.instruction_for(image_id, a, p)?;
                    debug_assert_eq!(ins.split, Split::Train);
                    let cap = self.corpus.caption_for(image_id, a)?;
                    b.image_ids.push(image_id.clone());
                    b.instruction_ids.push(ins.id.clone());
                    b.queries.push(assemble_query(&image.tokens, Some(&ins.tokens), self.max_seq)?);
                    b.candidate_ids.push(cap.id.clone());
                    b.candidates.push(cap.tokens.clone());
                }
            }
            out.push(b);
        }
        Ok(out)
    }

    pub fn next_batch(&mut self) -> Result<FinetuneBatch, BatchError> {
        while self.pending.is_empty() {
            self.pending.extend(self.epoch_batches(self.epoch)?);
            self.epoch += 1;
        }
        Ok(self.pending.pop_front().expect("non-empty"))
    }
}
