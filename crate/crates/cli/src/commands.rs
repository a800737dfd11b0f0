use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use abc_core::checkpoint::{Checkpoint, Stage};
use abc_core::corpus::{
    generate_ctrlbench, generate_world, read_ctrlbench, validate_corpus, write_ctrlbench, Corpus, ImageRecord,
    WorldConfig, CAPTIONS_FILE, CTRLBENCH_FILE, IMAGES_FILE, INSTRUCTIONS_FILE, WORLD_FILE,
};
use abc_core::eval::{
    binomial_sigma, eval_classification, eval_ctrlbench as run_ctrlbench, eval_retrieval as run_retrieval,
    ClassificationTask, EvalReport, WITHIN_IMAGE_R1,
};
use abc_core::mining::{audit, audit_window, build_mined_dataset, training_table, MinedDataset, MiningConfig, MiningError};
use abc_core::trainer::{
    run_arch_ablation, run_bootstrap, run_scaling_experiment, run_stage1, run_stage2, run_tau_experiment,
    ArchAblationConfig, RunError, RunOutput, ScalingConfig, TauExperimentConfig, TrainConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_or, ClassifyConfig, CtrlBenchConfig, ImageSet, RetrievalConfig};
use crate::error::{CliError, Staged};
use crate::{Common, Seeded, VERSION};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.abce";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MINED_FILE: &str = "mined.jsonl";

/// Run metadata written to `run.json` after every invocation, failed or not.
#[derive(Debug, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: BTreeMap<&'static str, String>,
    pub outputs: Vec<String>,
    pub summary: BTreeMap<String, Value>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

impl Report {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            version: VERSION,
            seed: None,
            config: Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
            error: None,
            wall_time_s: 0.0,
        }
    }

    fn config(&mut self, config: &impl Serialize) {
        self.config = serde_json::to_value(config).expect("configs serialize");
    }

    fn input(&mut self, name: &'static str, path: &Path) {
        self.inputs.insert(name, path.display().to_string());
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary values serialize"));
    }

    pub fn write(&mut self, out: &Path, elapsed: Duration) -> Result<(), CliError> {
        self.wall_time_s = elapsed.as_secs_f64();
        ensure_dir(out)?;
        write_json(&out.join(RUN_FILE), self)
    }
}

fn ensure_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::run("output", format!("cannot create {}: {e}", out.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).at("output")?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::run("output", format!("cannot write {}: {e}", path.display())))
}

fn load_corpus(path: &Path, report: &mut Report) -> Result<Corpus, CliError> {
    report.input("corpus", path);
    Corpus::load(path).at("corpus")
}

fn load_checkpoint(path: &Path, report: &mut Report) -> Result<Checkpoint, CliError> {
    report.input("model", path);
    Checkpoint::load(path).at("checkpoint")
}

fn load_mined(path: &Path, report: &mut Report) -> Result<MinedDataset, CliError> {
    report.input("mined", path);
    MinedDataset::read(path).at("mined")
}

/// Config file, full-scale settings or desk defaults, then the seed override.
fn train_config(
    name: &'static str,
    common: &Common,
    seeded: &Seeded,
    stage: Stage,
    desk: impl FnOnce() -> TrainConfig,
    report: &mut Report,
) -> Result<TrainConfig, CliError> {
    let mut cfg = if seeded.paper_scale {
        TrainConfig::paper(stage, 0)
    } else {
        load_or(name, common.config.as_deref(), desk)?
    };
    if let Some(seed) = seeded.seed {
        cfg.seed = seed;
    }
    report.seed = Some(cfg.seed);
    report.config(&cfg);
    check_train_config(name, &cfg, stage)?;
    Ok(cfg)
}

fn check_train_config(name: &'static str, cfg: &TrainConfig, stage: Stage) -> Result<(), CliError> {
    if cfg.stage != stage {
        return Err(CliError::config(
            name,
            format!("at `stage`: config is for stage {}, this command runs stage {stage}", cfg.stage),
        ));
    }
    cfg.validate().at(name)
}

/// Saves checkpoint and metrics; a diverged run still leaves its metrics behind.
fn finish_run(
    name: &'static str,
    result: Result<RunOutput, RunError>,
    out: &Path,
    report: &mut Report,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let output = match result {
        Ok(o) => o,
        Err(RunError::Diverged { step, metrics }) => {
            metrics.write_jsonl(&out.join(METRICS_FILE)).at(name)?;
            report.output(METRICS_FILE);
            return Err(CliError::run(name, format!("diverged at step {step} (non-finite loss or gradient)")));
        }
        Err(e) => return Err(e).at(name),
    };
    let ckpt = output.checkpoint();
    ckpt.save(&out.join(CHECKPOINT_FILE)).at(name)?;
    output.metrics.write_jsonl(&out.join(METRICS_FILE)).at(name)?;
    report.output(CHECKPOINT_FILE);
    report.output(METRICS_FILE);
    report.note("steps", output.metrics.steps.len());
    report.note("final_loss", output.metrics.final_loss());
    report.note("final_tau", ckpt.meta.tau);
    report.note("final_val_acc", output.metrics.final_val_acc);
    report.note("checkpoint_hash", ckpt.hash());
    log::info!("{name}: wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn gen_world(common: &Common, seed: Option<u64>, report: &mut Report) -> Result<(), CliError> {
    let mut cfg = load_or("gen-world", common.config.as_deref(), || WorldConfig::desk(0))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    report.seed = Some(cfg.seed);
    report.config(&cfg);
    cfg.validate().at("gen-world")?;
    let corpus = generate_world(&cfg).at("gen-world")?;
    ensure_dir(&common.out)?;
    corpus.write(&common.out).at("gen-world")?;
    for f in [IMAGES_FILE, CAPTIONS_FILE, INSTRUCTIONS_FILE, WORLD_FILE] {
        report.output(f);
    }
    if cfg.n_bench_images > 0 {
        let bench = generate_ctrlbench(&corpus, cfg.n_bench_images).at("gen-world")?;
        write_ctrlbench(&common.out, &bench).at("gen-world")?;
        report.output(CTRLBENCH_FILE);
        report.note("bench_records", bench.len());
    }
    report.note("images", corpus.images.len());
    report.note("captions", corpus.captions.len());
    report.note("corpus_hash", corpus.hash());
    Ok(())
}

pub fn bootstrap(common: &Common, seeded: &Seeded, corpus: &Path, report: &mut Report) -> Result<(), CliError> {
    let cfg = train_config("bootstrap", common, seeded, Stage::Bootstrap, || TrainConfig::desk_bootstrap(0), report)?;
    let corpus = load_corpus(corpus, report)?;
    finish_run("bootstrap", run_bootstrap(&cfg, &corpus), &common.out, report)
}

pub fn mine(
    common: &Common,
    seeded: &Seeded,
    corpus: &Path,
    model: &Path,
    allow_fewer: bool,
    report: &mut Report,
) -> Result<(), CliError> {
    let mut cfg = if seeded.paper_scale {
        MiningConfig::paper(0)
    } else {
        load_or("mine", common.config.as_deref(), || MiningConfig::paper(0))?
    };
    if let Some(s) = seeded.seed {
        cfg.seed = s;
    }
    report.seed = Some(cfg.seed);
    report.config(&cfg);
    report.note("allow_fewer", allow_fewer);
    cfg.validate().at("mine")?;
    let corpus = load_corpus(corpus, report)?;
    let ckpt = load_checkpoint(model, report)?;
    let (dataset, _) = build_mined_dataset(&ckpt.params, &corpus, &cfg, allow_fewer).map_err(|e| match e {
        MiningError::InsufficientNegatives { .. } => CliError::run("mine", format!("{e} (rerun with --allow-fewer to accept them)")),
        other => CliError::from_error("mine", other),
    })?;
    ensure_dir(&common.out)?;
    let path = common.out.join(MINED_FILE);
    dataset.write(&path).at("mine")?;
    report.output(MINED_FILE);
    // The file as written must pass the threshold audit.
    let reread = MinedDataset::read(&path).at("mine")?;
    audit(&reread, &cfg, allow_fewer).at("mine")?;
    report.note("records", reread.records.len());
    report.note("min_negatives", reread.min_negatives());
    Ok(())
}

pub fn pretrain(
    common: &Common,
    seeded: &Seeded,
    corpus: &Path,
    mined: &Path,
    report: &mut Report,
) -> Result<(), CliError> {
    let cfg = train_config("pretrain", common, seeded, Stage::Pretrain, || TrainConfig::desk_stage1(0), report)?;
    let corpus = load_corpus(corpus, report)?;
    let mined = load_mined(mined, report)?;
    finish_run("pretrain", run_stage1(&cfg, &corpus, &mined), &common.out, report)
}

pub fn finetune(
    common: &Common,
    seeded: &Seeded,
    corpus: &Path,
    model: Option<&Path>,
    report: &mut Report,
) -> Result<(), CliError> {
    if common.config.is_none() && model.is_none() {
        return Err(CliError::usage("finetune", "needs --model, or stage1_checkpoint in --config"));
    }
    let placeholder = model.map_or_else(|| PathBuf::from("stage1.abce"), Path::to_path_buf);
    let mut cfg = if seeded.paper_scale {
        TrainConfig::paper(Stage::Finetune, 0)
    } else {
        load_or("finetune", common.config.as_deref(), || TrainConfig::desk_stage2(0, placeholder))?
    };
    if let Some(m) = model {
        cfg.stage1_checkpoint = Some(m.to_path_buf());
    }
    if let Some(s) = seeded.seed {
        cfg.seed = s;
    }
    report.seed = Some(cfg.seed);
    report.config(&cfg);
    check_train_config("finetune", &cfg, Stage::Finetune)?;
    let stage1_path = cfg.stage1_checkpoint.clone().expect("validated");
    let corpus = load_corpus(corpus, report)?;
    report.input("model", &stage1_path);
    let stage1 = Checkpoint::load_stage(&stage1_path, Stage::Pretrain).at("checkpoint")?;
    finish_run("finetune", run_stage2(&cfg, &corpus, &stage1), &common.out, report)
}

fn select_images<'a>(
    name: &'static str,
    corpus: &'a Corpus,
    set: ImageSet,
    max: Option<usize>,
) -> Result<Vec<&'a ImageRecord>, CliError> {
    let mut images = match set {
        ImageSet::Train => corpus.train_images(),
        ImageSet::Bench => corpus.bench_images(),
    };
    if let Some(m) = max {
        if m == 0 || m > images.len() {
            return Err(CliError::config(
                name,
                format!("at `max_images`: {m} outside 1..={} for this image set", images.len()),
            ));
        }
        images.truncate(m);
    }
    Ok(images)
}

fn finish_eval(name: &'static str, eval: &EvalReport, dir: &Path, report: &mut Report) -> Result<(), CliError> {
    eval.write(dir).at(name)?;
    report.note("n_queries", eval.n_queries);
    for (k, v) in &eval.metrics {
        report.note(k, v);
    }
    Ok(())
}

pub fn eval_retrieval(common: &Common, corpus: &Path, model: &Path, report: &mut Report) -> Result<(), CliError> {
    let cfg = load_or("eval-retrieval", common.config.as_deref(), RetrievalConfig::default)?;
    report.config(&cfg);
    let corpus = load_corpus(corpus, report)?;
    let ckpt = load_checkpoint(model, report)?;
    let images = select_images("eval-retrieval", &corpus, cfg.images, cfg.max_images)?;
    let eval = run_retrieval(&ckpt, &corpus, &images, cfg.direction, &cfg.ks).at("eval-retrieval")?;
    finish_eval("eval-retrieval", &eval, &common.out, report)?;
    report.output("report.json");
    report.output("ranks.jsonl");
    Ok(())
}

pub fn eval_classify(common: &Common, corpus: &Path, model: &Path, report: &mut Report) -> Result<(), CliError> {
    let cfg = load_or("eval-classify", common.config.as_deref(), ClassifyConfig::default)?;
    report.config(&cfg);
    let corpus = load_corpus(corpus, report)?;
    let ckpt = load_checkpoint(model, report)?;
    let images = select_images("eval-classify", &corpus, cfg.images, cfg.max_images)?;
    let task = ClassificationTask::by_aspect(&corpus, cfg.aspect, &images).at("eval-classify")?;
    let eval = eval_classification(&ckpt, &corpus, &task, &cfg.template).at("eval-classify")?;
    finish_eval("eval-classify", &eval, &common.out, report)?;
    report.output("report.json");
    report.output("ranks.jsonl");
    Ok(())
}

pub fn eval_ctrlbench(
    common: &Common,
    corpus_dir: &Path,
    model: &Path,
    bench: Option<&Path>,
    report: &mut Report,
) -> Result<(), CliError> {
    let cfg = load_or("eval-ctrlbench", common.config.as_deref(), CtrlBenchConfig::default)?;
    report.config(&cfg);
    let corpus = load_corpus(corpus_dir, report)?;
    let ckpt = load_checkpoint(model, report)?;
    let bench_path = bench.map_or_else(|| corpus_dir.join(CTRLBENCH_FILE), Path::to_path_buf);
    report.input("bench", &bench_path);
    let records = read_ctrlbench(&bench_path).at("bench")?;
    let mut within = BTreeMap::new();
    for (arm, instructed) in [("instructed", true), ("blind", false)] {
        let eval = run_ctrlbench(&ckpt, &corpus, &records, instructed, &cfg.ks).at("eval-ctrlbench")?;
        eval.write(&common.out.join(arm)).at("eval-ctrlbench")?;
        report.output(&format!("{arm}/report.json"));
        report.output(&format!("{arm}/ranks.jsonl"));
        within.insert(arm, eval.metric(WITHIN_IMAGE_R1).unwrap_or(f64::NAN));
        report.note(arm, &eval.metrics);
    }
    let chance = 1.0 / corpus.config.n_aspects as f64;
    let sigma = binomial_sigma(chance, records.len());
    report.note("n_queries", records.len());
    report.note("chance", chance);
    report.note("sigma", sigma);
    report.note(
        "separation",
        json!({
            "instructed_above_chance_plus_3sigma": within["instructed"] > chance + 3.0 * sigma,
            "blind_within_3sigma_of_chance": (within["blind"] - chance).abs() <= 3.0 * sigma,
        }),
    );
    Ok(())
}

fn pretrain_base(
    name: &'static str,
    cfg_stage: &TrainConfig,
    seeded: &Seeded,
    report: &mut Report,
) -> Result<(), CliError> {
    report.seed = seeded.seed.or(Some(cfg_stage.seed));
    check_train_config(name, cfg_stage, Stage::Pretrain)
}

pub fn exp_tau(
    common: &Common,
    seeded: &Seeded,
    corpus: &Path,
    mined: &Path,
    model: &Path,
    report: &mut Report,
) -> Result<(), CliError> {
    let mut cfg = if seeded.paper_scale {
        TauExperimentConfig {
            pretrain: TrainConfig::paper(Stage::Pretrain, 0),
            ..TauExperimentConfig::desk()
        }
    } else {
        load_or("exp-tau", common.config.as_deref(), TauExperimentConfig::desk)?
    };
    if let Some(s) = seeded.seed {
        cfg.seeds = vec![s];
    }
    report.config(&cfg);
    pretrain_base("exp-tau", &cfg.pretrain, seeded, report)?;
    let corpus = load_corpus(corpus, report)?;
    let mined = load_mined(mined, report)?;
    let ckpt = load_checkpoint(model, report)?;
    let table = training_table(&ckpt.params, &corpus).at("exp-tau")?;
    let result = run_tau_experiment(&cfg, &corpus, &mined, &table).at("exp-tau")?;
    ensure_dir(&common.out)?;
    write_json(&common.out.join("tau_report.json"), &result)?;
    report.output("tau_report.json");
    let finals: Vec<Value> = result
        .final_taus()
        .into_iter()
        .map(|(seed, mined, random)| json!({"seed": seed, "mined": mined, "random": random}))
        .collect();
    report.note("final_tau", finals);
    Ok(())
}

pub fn exp_arch(
    common: &Common,
    seeded: &Seeded,
    corpus: &Path,
    mined: &Path,
    report: &mut Report,
) -> Result<(), CliError> {
    let mut cfg = if seeded.paper_scale {
        ArchAblationConfig {
            pretrain: TrainConfig::paper(Stage::Pretrain, 0),
            ..ArchAblationConfig::desk(0)
        }
    } else {
        load_or("exp-arch", common.config.as_deref(), || ArchAblationConfig::desk(0))?
    };
    if let Some(s) = seeded.seed {
        cfg.pretrain.seed = s;
    }
    report.config(&cfg);
    pretrain_base("exp-arch", &cfg.pretrain, seeded, report)?;
    let corpus = load_corpus(corpus, report)?;
    let mined = load_mined(mined, report)?;
    let result = run_arch_ablation(&cfg, &corpus, &mined).at("exp-arch")?;
    ensure_dir(&common.out)?;
    write_json(&common.out.join("arch_report.json"), &result)?;
    report.output("arch_report.json");
    report.note("rows", result.rows.len());
    Ok(())
}

pub fn exp_scaling(
    common: &Common,
    seeded: &Seeded,
    corpus: &Path,
    mined: &Path,
    report: &mut Report,
) -> Result<(), CliError> {
    let mut cfg = if seeded.paper_scale {
        ScalingConfig {
            pretrain: TrainConfig::paper(Stage::Pretrain, 0),
            ..ScalingConfig::desk(0)
        }
    } else {
        load_or("exp-scaling", common.config.as_deref(), || ScalingConfig::desk(0))?
    };
    if let Some(s) = seeded.seed {
        cfg.pretrain.seed = s;
    }
    report.config(&cfg);
    pretrain_base("exp-scaling", &cfg.pretrain, seeded, report)?;
    let corpus = load_corpus(corpus, report)?;
    let mined = load_mined(mined, report)?;
    let result = run_scaling_experiment(&cfg, &corpus, &mined).at("exp-scaling")?;
    ensure_dir(&common.out)?;
    write_json(&common.out.join("scaling_report.json"), &result)?;
    fs::write(common.out.join("scaling.md"), result.to_markdown())
        .map_err(|e| CliError::run("output", format!("cannot write scaling.md: {e}")))?;
    report.output("scaling_report.json");
    report.output("scaling.md");
    report.note("rows", result.rows.len());
    Ok(())
}

pub fn validate(
    common: &Common,
    corpus_dir: &Path,
    mined: Option<&Path>,
    model: Option<&Path>,
    allow_fewer: bool,
    report: &mut Report,
) -> Result<(), CliError> {
    report.input("corpus", corpus_dir);
    let summary = validate_corpus(corpus_dir).at("validate")?;
    report.note("corpus", &summary);
    let Some(mined_path) = mined else {
        return Ok(());
    };
    let cfg = load_or("validate", common.config.as_deref(), || MiningConfig::paper(0))?;
    report.config(&cfg);
    cfg.validate().at("validate")?;
    let dataset = load_mined(mined_path, report)?;
    audit(&dataset, &cfg, allow_fewer).at("validate")?;
    report.note("mined_records", dataset.records.len());
    report.note("threshold_audit", "ok");
    if let Some(m) = model {
        let corpus = Corpus::load(corpus_dir).at("corpus")?;
        let ckpt = load_checkpoint(m, report)?;
        let table = training_table(&ckpt.params, &corpus).at("validate")?;
        audit_window(&dataset, &table, &cfg).at("validate")?;
        report.note("window_audit", "ok");
    }
    Ok(())
}
