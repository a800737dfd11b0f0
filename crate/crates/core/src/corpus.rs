//! Deterministic synthetic world with several equally valid captions per image.
//!
//! Each image carries one value per aspect (a short run of aspect-specific
//! value tokens) with noise tokens scattered between them. The caption for
//! aspect `a` is `[marker_a, value tokens…]`; an instruction is a paraphrase
//! prefix followed by `marker_a`. Without the instruction every caption of an
//! image is equally consistent with it, so only the instruction can tell
//! which one is wanted.
//!
//! Paraphrases `0..P−1` are used for training; paraphrase `P−1` is held out
//! and only ever used by the benchmark.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{TokenSeq, RESERVED};
use crate::hashing::sha256_parts;
use crate::jsonl::{read_jsonl, to_jsonl, JsonlError};
use crate::rng::{derive_seed, seeded};

pub const IMAGES_FILE: &str = "images.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const INSTRUCTIONS_FILE: &str = "instructions.jsonl";
pub const CTRLBENCH_FILE: &str = "ctrlbench.jsonl";
pub const WORLD_FILE: &str = "world.json";

/// Words the classification template may use, in vocabulary order.
pub const TEMPLATE_WORDS: [&str; 5] = ["A", "photo", "of", "a", "."];
/// The classification prompt.
pub const CLASSIFY_TEMPLATE: &str = "A photo of a {label}.";
/// Stream that picks each image's pretraining caption.
const PRETRAIN_STREAM: u64 = 0x7072;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary too small to deduplicate: {available} distinct values per aspect for {needed} images")]
    VocabularyTooSmall { available: u128, needed: usize },
    #[error("need {needed} benchmark images, only {available} are disjoint from training")]
    InsufficientBenchImages { needed: usize, available: usize },
    #[error("benchmark leaks training asset: {0}")]
    BenchLeak(String),
    #[error("{file}:{line}: {detail}")]
    Violation { file: String, line: usize, detail: String },
    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },
    #[error("template `{0}` has no {{label}} placeholder")]
    MissingPlaceholder(String),
    #[error("template word `{0}` is not in the vocabulary")]
    UnknownTemplateWord(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_images: usize,
    /// The last `n_bench_images` images are reserved for the benchmark.
    pub n_bench_images: usize,
    pub n_aspects: usize,
    /// Instruction-free (web-style) captions describe one of the first
    /// `salient_aspects` aspects, picked per image.
    pub salient_aspects: usize,
    pub values_per_aspect: usize,
    /// Tokens per value.
    pub value_len: usize,
    pub paraphrases_per_aspect: usize,
    /// Tokens per paraphrase prefix.
    pub paraphrase_len: usize,
    pub noise_tokens_per_image: usize,
    /// Size of the noise-token vocabulary.
    pub noise_vocab: usize,
    pub seed: u64,
}

impl WorldConfig {
    /// Desk-scale defaults.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_images: 8200,
            n_bench_images: 200,
            n_aspects: 5,
            salient_aspects: 3,
            values_per_aspect: 96,
            value_len: 2,
            paraphrases_per_aspect: 3,
            paraphrase_len: 2,
            noise_tokens_per_image: 4,
            noise_vocab: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.into()));
        if self.n_aspects < 2 {
            return bad("n_aspects must be >= 2");
        }
        if self.salient_aspects == 0 || self.salient_aspects > self.n_aspects {
            return bad("salient_aspects must be in 1..=n_aspects");
        }
        if self.paraphrases_per_aspect < 2 {
            return bad("paraphrases_per_aspect must be >= 2 (one is held out)");
        }
        if self.n_images == 0 {
            return bad("n_images must be >= 1");
        }
        if self.n_bench_images > self.n_images {
            return bad("n_bench_images exceeds n_images");
        }
        if self.values_per_aspect == 0 || self.value_len == 0 || self.paraphrase_len == 0 {
            return bad("values_per_aspect, value_len and paraphrase_len must be >= 1");
        }
        if self.noise_tokens_per_image > 0 && self.noise_vocab == 0 {
            return bad("noise tokens requested with an empty noise vocabulary");
        }
        let available = (self.values_per_aspect as u128)
            .checked_pow(self.value_len as u32)
            .unwrap_or(u128::MAX);
        if available < self.n_images as u128 {
            return Err(CorpusError::VocabularyTooSmall {
                available,
                needed: self.n_images,
            });
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.n_aspects * self.value_len + self.noise_tokens_per_image
    }

    pub fn instruction_len(&self) -> usize {
        self.paraphrase_len + 1
    }

    /// Length of `<image> SEP <instruction>`.
    pub fn query_len(&self) -> usize {
        self.image_len() + 1 + self.instruction_len()
    }

    pub fn held_out_paraphrase(&self) -> usize {
        self.paraphrases_per_aspect - 1
    }
}

/// Token-id layout: reserved ids, template words, aspect markers, value
/// tokens, paraphrase tokens, noise tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub template_start: u32,
    pub marker_start: u32,
    pub value_start: u32,
    pub paraphrase_start: u32,
    pub noise_start: u32,
    pub size: usize,
    n_aspects: usize,
    values_per_aspect: usize,
    paraphrases: usize,
    paraphrase_len: usize,
}

impl Vocab {
    pub fn new(c: &WorldConfig) -> Self {
        let template_start = RESERVED;
        let marker_start = template_start + TEMPLATE_WORDS.len() as u32;
        let value_start = marker_start + c.n_aspects as u32;
        let paraphrase_start = value_start + (c.n_aspects * c.values_per_aspect) as u32;
        let noise_start = paraphrase_start + (c.n_aspects * c.paraphrases_per_aspect * c.paraphrase_len) as u32;
        Self {
            template_start,
            marker_start,
            value_start,
            paraphrase_start,
            noise_start,
            size: noise_start as usize + c.noise_vocab,
            n_aspects: c.n_aspects,
            values_per_aspect: c.values_per_aspect,
            paraphrases: c.paraphrases_per_aspect,
            paraphrase_len: c.paraphrase_len,
        }
    }

    pub fn marker(&self, aspect: usize) -> u32 {
        self.marker_start + aspect as u32
    }

    pub fn value(&self, aspect: usize, v: usize) -> u32 {
        self.value_start + (aspect * self.values_per_aspect + v) as u32
    }

    /// Aspect owning a value token, if `t` is one.
    pub fn value_aspect(&self, t: u32) -> Option<usize> {
        (t >= self.value_start && t < self.paraphrase_start)
            .then(|| (t - self.value_start) as usize / self.values_per_aspect)
    }

    pub fn paraphrase(&self, aspect: usize, p: usize, i: usize) -> u32 {
        self.paraphrase_start + ((aspect * self.paraphrases + p) * self.paraphrase_len + i) as u32
    }

    pub fn noise(&self, i: usize) -> u32 {
        self.noise_start + i as u32
    }

    pub fn template_word(&self, w: &str) -> Option<u32> {
        TEMPLATE_WORDS
            .iter()
            .position(|x| *x == w)
            .map(|i| self.template_start + i as u32)
    }

    pub fn instruction(&self, aspect: usize, paraphrase: usize) -> TokenSeq {
        let mut t: Vec<u32> = (0..self.paraphrase_len).map(|i| self.paraphrase(aspect, paraphrase, i)).collect();
        t.push(self.marker(aspect));
        TokenSeq(t)
    }

    pub fn n_aspects(&self) -> usize {
        self.n_aspects
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Bench,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub image_id: String,
    pub aspect: usize,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub id: String,
    pub image_id: String,
    pub aspect: usize,
    pub paraphrase: usize,
    pub tokens: TokenSeq,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRecord {
    pub image_id: String,
    pub instruction_id: String,
    pub positive_caption_id: String,
}

/// Contents of `world.json`: the generating config and the token layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub bench_images: Vec<String>,
}

pub fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

pub fn caption_id(i: usize, aspect: usize) -> String {
    format!("cap{i:05}_{aspect}")
}

pub fn instruction_id(i: usize, aspect: usize, p: usize) -> String {
    format!("ins{i:05}_{aspect}_{p}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub instructions: Vec<InstructionRecord>,
    image_index: HashMap<String, usize>,
    caption_index: HashMap<String, usize>,
    instruction_index: HashMap<String, usize>,
}

fn index_of<'a>(ids: impl Iterator<Item = &'a String>) -> HashMap<String, usize> {
    ids.enumerate().map(|(i, id)| (id.clone(), i)).collect()
}

/// Builds the world. Deterministic per config (including its seed).
pub fn generate_world(config: &WorldConfig) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let vocab = Vocab::new(config);
    let mut rng = seeded(config.seed);

    // values[i][a] = value indices of image i for aspect a, distinct per aspect
    let mut values = vec![Vec::with_capacity(config.n_aspects); config.n_images];
    for _a in 0..config.n_aspects {
        let mut used = BTreeSet::new();
        for row in values.iter_mut() {
            let v = loop {
                let cand: Vec<usize> = (0..config.value_len)
                    .map(|_| rng.random_range(0..config.values_per_aspect))
                    .collect();
                if used.insert(cand.clone()) {
                    break cand;
                }
            };
            row.push(v);
        }
    }

    let first_bench = config.n_images - config.n_bench_images;
    let held_out = config.held_out_paraphrase();
    let mut images = Vec::with_capacity(config.n_images);
    let mut captions = Vec::with_capacity(config.n_images * config.n_aspects);
    let mut instructions = Vec::new();
    for (i, vals) in values.iter().enumerate() {
        let mut slots: Vec<Vec<u32>> = vals
            .iter()
            .enumerate()
            .map(|(a, v)| v.iter().map(|&x| vocab.value(a, x)).collect())
            .collect();
        for _ in 0..config.noise_tokens_per_image {
            let pos = rng.random_range(0..=slots.len());
            slots.insert(pos, vec![vocab.noise(rng.random_range(0..config.noise_vocab))]);
        }
        images.push(ImageRecord {
            id: image_id(i),
            tokens: TokenSeq(slots.concat()),
        });
        let bench = i >= first_bench;
        for (a, v) in vals.iter().enumerate() {
            let mut t = vec![vocab.marker(a)];
            t.extend(v.iter().map(|&x| vocab.value(a, x)));
            captions.push(CaptionRecord {
                id: caption_id(i, a),
                image_id: image_id(i),
                aspect: a,
                tokens: TokenSeq(t),
            });
            for p in 0..config.paraphrases_per_aspect {
                let split = match (bench, p == held_out) {
                    (false, false) => Split::Train,
                    (true, true) => Split::Bench,
                    _ => Split::Heldout,
                };
                instructions.push(InstructionRecord {
                    id: instruction_id(i, a, p),
                    image_id: image_id(i),
                    aspect: a,
                    paraphrase: p,
                    tokens: vocab.instruction(a, p),
                    split,
                });
            }
        }
    }
    Ok(Corpus::from_parts(config.clone(), vocab, images, captions, instructions))
}

impl Corpus {
    pub fn from_parts(
        config: WorldConfig,
        vocab: Vocab,
        images: Vec<ImageRecord>,
        captions: Vec<CaptionRecord>,
        instructions: Vec<InstructionRecord>,
    ) -> Self {
        Self {
            image_index: index_of(images.iter().map(|r| &r.id)),
            caption_index: index_of(captions.iter().map(|r| &r.id)),
            instruction_index: index_of(instructions.iter().map(|r| &r.id)),
            config,
            vocab,
            images,
            captions,
            instructions,
        }
    }

    pub fn image(&self, id: &str) -> Result<&ImageRecord, CorpusError> {
        self.image_index
            .get(id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| CorpusError::UnknownId {
                kind: "image",
                id: id.into(),
            })
    }

    pub fn caption(&self, id: &str) -> Result<&CaptionRecord, CorpusError> {
        self.caption_index
            .get(id)
            .map(|&i| &self.captions[i])
            .ok_or_else(|| CorpusError::UnknownId {
                kind: "caption",
                id: id.into(),
            })
    }

    pub fn instruction(&self, id: &str) -> Result<&InstructionRecord, CorpusError> {
        self.instruction_index
            .get(id)
            .map(|&i| &self.instructions[i])
            .ok_or_else(|| CorpusError::UnknownId {
                kind: "instruction",
                id: id.into(),
            })
    }

    fn image_number(&self, image_id: &str) -> Result<usize, CorpusError> {
        self.image_index.get(image_id).copied().ok_or_else(|| CorpusError::UnknownId {
            kind: "image",
            id: image_id.into(),
        })
    }

    /// Caption of `image_id` for `aspect`.
    pub fn caption_for(&self, image_id: &str, aspect: usize) -> Result<&CaptionRecord, CorpusError> {
        self.caption(&caption_id(self.image_number(image_id)?, aspect))
    }

    /// Aspect whose caption is the image's positive in instruction-free
    /// training: one of the salient aspects, fixed per (world seed, image).
    pub fn pretrain_aspect(&self, image_id: &str) -> Result<usize, CorpusError> {
        let i = self.image_number(image_id)?;
        let draw = derive_seed(derive_seed(self.config.seed, PRETRAIN_STREAM), i as u64);
        Ok((draw % self.config.salient_aspects as u64) as usize)
    }

    pub fn pretrain_caption(&self, image_id: &str) -> Result<&CaptionRecord, CorpusError> {
        self.caption_for(image_id, self.pretrain_aspect(image_id)?)
    }

    pub fn instruction_for(&self, image_id: &str, aspect: usize, paraphrase: usize) -> Result<&InstructionRecord, CorpusError> {
        self.instruction(&instruction_id(self.image_number(image_id)?, aspect, paraphrase))
    }

    pub fn is_bench_image(&self, image_id: &str) -> bool {
        self.image_index
            .get(image_id)
            .is_some_and(|&i| i >= self.config.n_images - self.config.n_bench_images)
    }

    pub fn train_images(&self) -> Vec<&ImageRecord> {
        self.images.iter().filter(|r| !self.is_bench_image(&r.id)).collect()
    }

    pub fn bench_images(&self) -> Vec<&ImageRecord> {
        self.images.iter().filter(|r| self.is_bench_image(&r.id)).collect()
    }

    /// Captions of training images: the only candidates training may see.
    pub fn train_captions(&self) -> Vec<&CaptionRecord> {
        self.captions.iter().filter(|c| !self.is_bench_image(&c.image_id)).collect()
    }

    pub fn meta(&self) -> WorldMeta {
        WorldMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            bench_images: self.bench_images().iter().map(|r| r.id.clone()).collect(),
        }
    }

    /// Hash over the three data files exactly as written.
    pub fn hash(&self) -> String {
        let files = [to_jsonl(&self.images), to_jsonl(&self.captions), to_jsonl(&self.instructions)];
        sha256_parts(files.iter().map(Vec::as_slice))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        write_file(dir, IMAGES_FILE, &to_jsonl(&self.images))?;
        write_file(dir, CAPTIONS_FILE, &to_jsonl(&self.captions))?;
        write_file(dir, INSTRUCTIONS_FILE, &to_jsonl(&self.instructions))?;
        let meta = serde_json::to_vec_pretty(&self.meta()).expect("world meta serializes");
        write_file(dir, WORLD_FILE, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let meta = read_meta(dir)?;
        fn strip<T>(v: Vec<(usize, T)>) -> Vec<T> {
            v.into_iter().map(|(_, r)| r).collect()
        }
        Ok(Self::from_parts(
            meta.config,
            meta.vocab,
            strip(read_jsonl(&dir.join(IMAGES_FILE))?),
            strip(read_jsonl(&dir.join(CAPTIONS_FILE))?),
            strip(read_jsonl(&dir.join(INSTRUCTIONS_FILE))?),
        ))
    }

    /// Renders `template` with `label` tokens substituted for `{label}`.
    pub fn render_template(&self, template: &str, label: &TokenSeq) -> Result<TokenSeq, CorpusError> {
        let (pre, post) = template
            .split_once("{label}")
            .ok_or_else(|| CorpusError::MissingPlaceholder(template.into()))?;
        let mut out = self.template_words(pre)?;
        out.extend_from_slice(label);
        out.extend(self.template_words(post)?);
        Ok(TokenSeq(out))
    }

    fn template_words(&self, s: &str) -> Result<Vec<u32>, CorpusError> {
        let spaced = s.replace('.', " . ");
        spaced
            .split_whitespace()
            .map(|w| {
                self.vocab
                    .template_word(w)
                    .ok_or_else(|| CorpusError::UnknownTemplateWord(w.into()))
            })
            .collect()
    }

    /// Single-token labels for classifying `images` by the first value token
    /// of `aspect`. Returns label names, label tokens and per-image targets.
    pub fn classification_task(
        &self,
        aspect: usize,
        images: &[&ImageRecord],
    ) -> Result<(Vec<String>, Vec<TokenSeq>, Vec<usize>), CorpusError> {
        let mut labels: BTreeMap<u32, usize> = BTreeMap::new();
        let mut firsts = Vec::with_capacity(images.len());
        for img in images {
            let cap = self.caption_for(&img.id, aspect)?;
            let t = cap.tokens[1];
            firsts.push(t);
            labels.insert(t, 0);
        }
        for (k, v) in labels.values_mut().enumerate() {
            *v = k;
        }
        let names = labels
            .keys()
            .map(|&t| format!("a{aspect}v{}", t - self.vocab.value(aspect, 0)))
            .collect();
        let tokens = labels.keys().map(|&t| TokenSeq(vec![t])).collect();
        let gt = firsts.iter().map(|t| labels[t]).collect();
        Ok((names, tokens, gt))
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CorpusError> {
    let path = dir.join(name);
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(&path, bytes))
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn read_meta(dir: &Path) -> Result<WorldMeta, CorpusError> {
    let path = dir.join(WORLD_FILE);
    let text = fs::read_to_string(&path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// One (instruction, positive caption) pair per aspect for each of the
/// first `n_bench_images` benchmark images, instructions from the held-out
/// paraphrase only.
pub fn generate_ctrlbench(corpus: &Corpus, n_bench_images: usize) -> Result<Vec<BenchRecord>, CorpusError> {
    let bench = corpus.bench_images();
    if bench.len() < n_bench_images {
        return Err(CorpusError::InsufficientBenchImages {
            needed: n_bench_images,
            available: bench.len(),
        });
    }
    let held_out = corpus.config.held_out_paraphrase();
    let mut out = Vec::with_capacity(n_bench_images * corpus.config.n_aspects);
    for img in &bench[..n_bench_images] {
        for a in 0..corpus.config.n_aspects {
            let ins = corpus.instruction_for(&img.id, a, held_out)?;
            let cap = corpus.caption_for(&img.id, a)?;
            if ins.split != Split::Bench {
                return Err(CorpusError::BenchLeak(format!("instruction {} has split {:?}", ins.id, ins.split)));
            }
            out.push(BenchRecord {
                image_id: img.id.clone(),
                instruction_id: ins.id.clone(),
                positive_caption_id: cap.id.clone(),
            });
        }
    }
    check_bench_disjoint(corpus, &out)?;
    Ok(out)
}

/// Fails if any benchmark record touches a training image, caption or
/// instruction.
pub fn check_bench_disjoint(corpus: &Corpus, bench: &[BenchRecord]) -> Result<(), CorpusError> {
    let train_captions: BTreeSet<&str> = corpus.train_captions().iter().map(|c| c.id.as_str()).collect();
    for r in bench {
        if !corpus.is_bench_image(&r.image_id) {
            return Err(CorpusError::BenchLeak(format!("image {} is a training image", r.image_id)));
        }
        if train_captions.contains(r.positive_caption_id.as_str()) {
            return Err(CorpusError::BenchLeak(format!("caption {} is used in training", r.positive_caption_id)));
        }
        let ins = corpus.instruction(&r.instruction_id)?;
        if ins.split == Split::Train {
            return Err(CorpusError::BenchLeak(format!("instruction {} is used in training", ins.id)));
        }
    }
    Ok(())
}

pub fn write_ctrlbench(dir: &Path, bench: &[BenchRecord]) -> Result<(), CorpusError> {
    write_file(dir, CTRLBENCH_FILE, &to_jsonl(bench))
}

pub fn read_ctrlbench(path: &Path) -> Result<Vec<BenchRecord>, CorpusError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Summary returned by a successful [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationSummary {
    pub images: usize,
    pub captions: usize,
    pub instructions: usize,
    pub bench_records: Option<usize>,
}

/// Re-checks every corpus invariant on the files in `dir` and reports the
/// first violation with its file and line.
pub fn validate_corpus(dir: &Path) -> Result<ValidationSummary, CorpusError> {
    let meta = read_meta(dir)?;
    let cfg = &meta.config;
    let vocab = &meta.vocab;
    if *vocab != Vocab::new(cfg) {
        return Err(CorpusError::Violation {
            file: WORLD_FILE.into(),
            line: 1,
            detail: "vocabulary layout does not match config".into(),
        });
    }
    let images: Vec<(usize, ImageRecord)> = read_jsonl(&dir.join(IMAGES_FILE))?;
    let captions: Vec<(usize, CaptionRecord)> = read_jsonl(&dir.join(CAPTIONS_FILE))?;
    let instructions: Vec<(usize, InstructionRecord)> = read_jsonl(&dir.join(INSTRUCTIONS_FILE))?;
    let violation = |file: &str, line: usize, detail: String| {
        Err(CorpusError::Violation {
            file: file.into(),
            line,
            detail,
        })
    };

    let mut image_tokens: HashMap<&str, &TokenSeq> = HashMap::new();
    for (line, r) in &images {
        if image_tokens.insert(&r.id, &r.tokens).is_some() {
            return violation(IMAGES_FILE, *line, format!("duplicate image id {}", r.id));
        }
        if r.tokens.len() != cfg.image_len() || r.tokens.iter().any(|&t| t as usize >= vocab.size) {
            return violation(IMAGES_FILE, *line, format!("image {} has malformed tokens", r.id));
        }
    }
    if images.len() != cfg.n_images {
        return violation(IMAGES_FILE, images.len(), format!("{} images, expected {}", images.len(), cfg.n_images));
    }

    let mut seen_tokens: HashMap<&TokenSeq, &str> = HashMap::new();
    let mut aspects: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for (line, r) in &captions {
        let Some(img) = image_tokens.get(r.image_id.as_str()) else {
            return violation(CAPTIONS_FILE, *line, format!("caption {} refers to unknown image {}", r.id, r.image_id));
        };
        if let Some(prev) = seen_tokens.insert(&r.tokens, &r.id) {
            return violation(CAPTIONS_FILE, *line, format!("caption {} duplicates the tokens of {prev}", r.id));
        }
        if r.aspect >= cfg.n_aspects || !aspects.entry(&r.image_id).or_default().insert(r.aspect) {
            return violation(
                CAPTIONS_FILE,
                *line,
                format!("image {} has a repeated or invalid aspect {}", r.image_id, r.aspect),
            );
        }
        // the caption is the aspect marker followed by the image's value run
        let expected: Vec<u32> = img.iter().copied().filter(|&t| vocab.value_aspect(t) == Some(r.aspect)).collect();
        if r.tokens.first() != Some(&vocab.marker(r.aspect)) || r.tokens[1..] != expected[..] {
            return violation(CAPTIONS_FILE, *line, format!("caption {} is not recoverable from its image", r.id));
        }
    }
    for (line, r) in &images {
        let n = aspects.get(r.id.as_str()).map_or(0, BTreeSet::len);
        if n != cfg.n_aspects {
            return violation(IMAGES_FILE, *line, format!("image {} has {n} captions, expected {}", r.id, cfg.n_aspects));
        }
    }

    let bench_images: BTreeSet<&str> = meta.bench_images.iter().map(String::as_str).collect();
    let held_out = cfg.held_out_paraphrase();
    let mut instruction_split: HashMap<&str, (&str, usize, Split)> = HashMap::new();
    for (line, r) in &instructions {
        if !image_tokens.contains_key(r.image_id.as_str()) {
            return violation(INSTRUCTIONS_FILE, *line, format!("instruction {} refers to unknown image", r.id));
        }
        if r.aspect >= cfg.n_aspects || r.paraphrase >= cfg.paraphrases_per_aspect {
            return violation(INSTRUCTIONS_FILE, *line, format!("instruction {} out of range", r.id));
        }
        if r.tokens != vocab.instruction(r.aspect, r.paraphrase) {
            return violation(INSTRUCTIONS_FILE, *line, format!("instruction {} tokens do not match its aspect", r.id));
        }
        let bench = bench_images.contains(r.image_id.as_str());
        let expected = match (bench, r.paraphrase == held_out) {
            (false, false) => Split::Train,
            (true, true) => Split::Bench,
            _ => Split::Heldout,
        };
        if r.split != expected {
            return violation(INSTRUCTIONS_FILE, *line, format!("instruction {} has split {:?}, expected {:?}", r.id, r.split, expected));
        }
        if instruction_split.insert(&r.id, (&r.image_id, r.aspect, r.split)).is_some() {
            return violation(INSTRUCTIONS_FILE, *line, format!("duplicate instruction id {}", r.id));
        }
    }
    let expected_instructions = cfg.n_images * cfg.n_aspects * cfg.paraphrases_per_aspect;
    if instructions.len() != expected_instructions {
        return violation(
            INSTRUCTIONS_FILE,
            instructions.len(),
            format!("{} instructions, expected {expected_instructions}", instructions.len()),
        );
    }

    let bench_path = dir.join(CTRLBENCH_FILE);
    let bench_records = if bench_path.exists() {
        let caption_meta: HashMap<&str, (&str, usize)> =
            captions.iter().map(|(_, c)| (c.id.as_str(), (c.image_id.as_str(), c.aspect))).collect();
        let rows: Vec<(usize, BenchRecord)> = read_jsonl(&bench_path)?;
        for (line, r) in &rows {
            if !bench_images.contains(r.image_id.as_str()) {
                return violation(CTRLBENCH_FILE, *line, format!("image {} is not a benchmark image", r.image_id));
            }
            let Some(&(img, aspect, split)) = instruction_split.get(r.instruction_id.as_str()) else {
                return violation(CTRLBENCH_FILE, *line, format!("unknown instruction {}", r.instruction_id));
            };
            if split != Split::Bench || img != r.image_id {
                return violation(CTRLBENCH_FILE, *line, format!("instruction {} is not a held-out benchmark instruction", r.instruction_id));
            }
            if caption_meta.get(r.positive_caption_id.as_str()) != Some(&(img, aspect)) {
                return violation(CTRLBENCH_FILE, *line, format!("caption {} does not answer {}", r.positive_caption_id, r.instruction_id));
            }
        }
        Some(rows.len())
    } else {
        None
    };

    Ok(ValidationSummary {
        images: images.len(),
        captions: captions.len(),
        instructions: instructions.len(),
        bench_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_images: 100,
            n_bench_images: 20,
            n_aspects: 4,
            salient_aspects: 2,
            values_per_aspect: 12,
            value_len: 2,
            paraphrases_per_aspect: 3,
            paraphrase_len: 2,
            noise_tokens_per_image: 3,
            noise_vocab: 10,
            seed: 5,
        }
    }

    #[test]
    fn counts_follow_config() {
        let c = generate_world(&small()).unwrap();
        assert_eq!(c.images.len(), 100);
        assert_eq!(c.captions.len(), 400);
        assert_eq!(c.instructions.len(), 100 * 4 * 3);
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(&small()).unwrap(), generate_world(&small()).unwrap());
        let mut other = small();
        other.seed = 6;
        assert_ne!(generate_world(&small()).unwrap().images, generate_world(&other).unwrap().images);
    }

    #[test]
    fn captions_share_values_only_with_their_aspect() {
        let c = generate_world(&small()).unwrap();
        for img in &c.images {
            for a in 0..4 {
                let cap = c.caption_for(&img.id, a).unwrap();
                for &t in &cap.tokens[1..] {
                    assert!(img.tokens.contains(&t));
                }
                for b in (0..4).filter(|&b| b != a) {
                    let other = c.caption_for(&img.id, b).unwrap();
                    assert!(other.tokens[1..].iter().all(|t| !cap.tokens[1..].contains(t)));
                }
            }
        }
    }

    #[test]
    fn tiny_vocabulary_rejected() {
        let mut cfg = small();
        cfg.values_per_aspect = 3;
        assert!(matches!(generate_world(&cfg), Err(CorpusError::VocabularyTooSmall { available: 9, .. })));
    }

    #[test]
    fn template_rendering() {
        let c = generate_world(&small()).unwrap();
        let dog = TokenSeq(vec![c.vocab.value(0, 3)]);
        let t = c.render_template(CLASSIFY_TEMPLATE, &dog).unwrap();
        let tpl = c.vocab.template_start;
        assert_eq!(t.0, vec![tpl, tpl + 1, tpl + 2, tpl + 3, c.vocab.value(0, 3), tpl + 4]);
        assert!(matches!(c.render_template("A photo", &dog), Err(CorpusError::MissingPlaceholder(_))));
    }

    #[test]
    fn bench_uses_held_out_paraphrases() {
        let c = generate_world(&small()).unwrap();
        let b = generate_ctrlbench(&c, 20).unwrap();
        assert_eq!(b.len(), 80);
        for r in &b {
            assert_eq!(c.instruction(&r.instruction_id).unwrap().paraphrase, 2);
        }
        assert!(matches!(
            generate_ctrlbench(&c, 21),
            Err(CorpusError::InsufficientBenchImages { needed: 21, available: 20 })
        ));
    }

    #[test]
    fn leak_detected() {
        let c = generate_world(&small()).unwrap();
        let mut b = generate_ctrlbench(&c, 1).unwrap();
        b[0].positive_caption_id = caption_id(0, 0);
        assert!(matches!(check_bench_disjoint(&c, &b), Err(CorpusError::BenchLeak(_))));
    }
}
