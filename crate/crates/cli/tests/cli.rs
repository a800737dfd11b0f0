use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};

fn abc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abc"))
        .args(args)
        .env("ABC_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn world(seed: u64) -> Value {
    json!({
        "n_images": 240, "n_bench_images": 40, "n_aspects": 5, "salient_aspects": 3,
        "values_per_aspect": 16, "value_len": 2, "paraphrases_per_aspect": 3, "paraphrase_len": 2,
        "noise_tokens_per_image": 4, "noise_vocab": 32, "seed": seed
    })
}

fn train(stage: &str, steps: usize) -> Value {
    let mut v = json!({
        "stage": stage, "steps": steps, "lr": 1e-3, "betas": [0.9, 0.999], "weight_decay": 1e-3,
        "warmup_frac": 0.03, "batch": {"contrastive": {"n": 16, "m": 16}}, "lora_rank": 0, "lora_alpha": 0.0,
        "tau_init": 0.07, "seed": 1, "eval_every": 10, "val_images": 16, "train_base_weights": true
    });
    match stage {
        "1" => {
            v["batch"] = json!({"contrastive": {"n": 8, "m": 64}});
            v["lora_rank"] = json!(4);
            v["lora_alpha"] = json!(8.0);
        }
        "2" => {
            v["batch"] = json!({"grouped": {"images": 4, "group_size": 4}});
            v["lora_rank"] = json!(4);
            v["lora_alpha"] = json!(8.0);
            v["tau_init"] = Value::Null;
            v["train_base_weights"] = json!(false);
        }
        _ => {}
    }
    v
}

/// Artifacts of one small pipeline run, shared by the tests that only read them.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let f = Fixture { root };
        write_json(&f.p("world.json"), &world(5));
        write_json(&f.p("boot.json"), &train("bootstrap", 20));
        write_json(&f.p("s1.json"), &train("1", 20));
        write_json(&f.p("s2.json"), &train("2", 10));
        ok(abc(&["gen-world", "--config", s(&f.p("world.json")), "--out", s(&f.p("world"))]));
        ok(abc(&["bootstrap", "--config", s(&f.p("boot.json")), "--corpus", s(&f.p("world")), "--out", s(&f.p("boot"))]));
        ok(abc(&[
            "mine", "--corpus", s(&f.p("world")), "--model", s(&f.p("boot/checkpoint.abce")), "--out", s(&f.p("mined")),
        ]));
        ok(abc(&[
            "pretrain", "--config", s(&f.p("s1.json")), "--corpus", s(&f.p("world")), "--mined",
            s(&f.p("mined/mined.jsonl")), "--out", s(&f.p("stage1")),
        ]));
        ok(abc(&[
            "finetune", "--config", s(&f.p("s2.json")), "--corpus", s(&f.p("world")), "--model",
            s(&f.p("stage1/checkpoint.abce")), "--out", s(&f.p("stage2")),
        ]));
        f
    })
}

#[test]
fn unknown_command_prints_usage_and_exits_2() {
    let o = abc(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_required_flag_exits_2() {
    let o = abc(&["bootstrap", "--out", "unused"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--corpus"));
}

#[test]
fn paper_scale_conflicts_with_config() {
    let o = abc(&["bootstrap", "--paper-scale", "--config", "x.json", "--corpus", "c", "--out", "o"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_type_error_exits_3_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = world(1);
    w["noise_vocab"] = json!("many");
    write_json(&dir.path().join("w.json"), &w);
    let out = dir.path().join("out");
    let o = abc(&["gen-world", "--config", s(&dir.path().join("w.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("`noise_vocab`"), "{}", stderr(&o));
    let run = read_json(&out.join("run.json"));
    assert!(run["error"].as_str().unwrap().contains("noise_vocab"));
}

#[test]
fn unknown_config_field_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = train("bootstrap", 5);
    t["learning_rate"] = json!(0.1);
    write_json(&dir.path().join("t.json"), &t);
    let o = abc(&["bootstrap", "--config", s(&dir.path().join("t.json")), "--corpus", "c", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn semantic_config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = train("bootstrap", 5);
    t["lr"] = json!(0.0);
    write_json(&dir.path().join("lr.json"), &t);
    let o = abc(&["bootstrap", "--config", s(&dir.path().join("lr.json")), "--corpus", "c", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("lr"));

    // A stage-1 config handed to the bootstrap command.
    write_json(&dir.path().join("s1.json"), &train("1", 5));
    let o = abc(&["bootstrap", "--config", s(&dir.path().join("s1.json")), "--corpus", "c", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("`stage`"));

    let mut w = world(1);
    w["values_per_aspect"] = json!(4);
    write_json(&dir.path().join("w.json"), &w);
    let o = abc(&["gen-world", "--config", s(&dir.path().join("w.json")), "--out", s(&dir.path().join("w"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn finetune_without_stage1_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = abc(&["finetune", "--corpus", "c", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--model"));
}

#[test]
fn runtime_failures_exit_1_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = abc(&["bootstrap", "--corpus", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("corpus failed"), "{}", stderr(&o));
}

#[test]
fn pipeline_writes_artifacts_and_run_metadata() {
    let f = fixture();
    for file in ["images.jsonl", "captions.jsonl", "instructions.jsonl", "world.json", "ctrlbench.jsonl"] {
        assert!(f.p("world").join(file).is_file(), "{file}");
    }
    for dir in ["boot", "stage1", "stage2"] {
        assert!(f.p(dir).join("checkpoint.abce").is_file());
        assert!(fs::read_to_string(f.p(dir).join("metrics.jsonl")).unwrap().lines().count() > 0);
    }
    let run = read_json(&f.p("stage1/run.json"));
    assert_eq!(run["command"], "pretrain");
    assert_eq!(run["seed"], 1);
    assert_eq!(run["config"]["lr"], 1e-3);
    assert!(run["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(run["wall_time_s"].as_f64().unwrap() > 0.0);
    assert!(run["error"].is_null());
    assert_eq!(run["summary"]["steps"], 20);

    let mined = read_json(&f.p("mined/run.json"));
    assert_eq!(mined["config"], json!({"epsilon": 0.95, "k": 7, "window": 100, "seed": 0}));
    assert_eq!(mined["summary"]["records"], 200);
}

#[test]
fn evaluations_write_reports() {
    let f = fixture();
    let world = s(&f.p("world")).to_string();
    let model = s(&f.p("stage2/checkpoint.abce")).to_string();
    let out = f.p("eval-ctrl");
    ok(abc(&["eval-ctrlbench", "--corpus", &world, "--model", &model, "--out", s(&out)]));
    for arm in ["instructed", "blind"] {
        let r = read_json(&out.join(arm).join("report.json"));
        assert_eq!(r["n_queries"], 200);
        assert!(r["metrics"]["within_image_R@1"].is_number());
    }
    // Blind queries are identical within an image group: exactly 1/g.
    let blind = read_json(&out.join("blind/report.json"));
    assert_eq!(blind["metrics"]["within_image_R@1"], 0.2);

    let out = f.p("eval-ret");
    ok(abc(&["eval-retrieval", "--corpus", &world, "--model", &model, "--out", s(&out)]));
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["task"], "retrieval_image_to_text");
    assert_eq!(r["n_queries"], 40);
    assert_eq!(fs::read_to_string(out.join("ranks.jsonl")).unwrap().lines().count(), 40);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cls.json");
    write_json(&cfg, &json!({"aspect": 1, "template": "A photo of a {label}.", "images": "train", "max_images": 50}));
    let out = f.p("eval-cls");
    ok(abc(&["eval-classify", "--config", s(&cfg), "--corpus", &world, "--model", &model, "--out", s(&out)]));
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["n_queries"], 50);
    let acc = r["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    write_json(&cfg, &json!({"aspect": 1, "template": "A photo of a thing.", "images": "train", "max_images": 5}));
    let o = abc(&["eval-classify", "--config", s(&cfg), "--corpus", &world, "--model", &model, "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn validate_audits_corpus_and_mined_file() {
    let f = fixture();
    let out = f.p("validate");
    ok(abc(&[
        "validate", "--corpus", s(&f.p("world")), "--mined", s(&f.p("mined/mined.jsonl")), "--model",
        s(&f.p("boot/checkpoint.abce")), "--out", s(&out),
    ]));
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["summary"]["threshold_audit"], "ok");
    assert_eq!(run["summary"]["window_audit"], "ok");
    assert_eq!(run["summary"]["corpus"]["images"], 240);

    // A tampered negative score breaks the threshold audit.
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(f.p("mined/mined.jsonl")).unwrap();
    let mut lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let pos = lines[0]["pos_score"].as_f64().unwrap();
    lines[0]["neg_scores"][0] = json!(pos);
    let bad = dir.path().join("bad.jsonl");
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&bad, body).unwrap();
    let o = abc(&["validate", "--corpus", s(&f.p("world")), "--mined", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("validate failed"));
}

#[test]
fn mine_reports_insufficient_negatives_unless_allowed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mine.json");
    write_json(&cfg, &json!({"epsilon": 0.95, "k": 5000, "window": 5000, "seed": 0}));
    let args = |out: &Path, extra: &[&'static str]| {
        let mut a = vec![
            "mine".to_string(),
            "--config".into(),
            s(&cfg).into(),
            "--corpus".into(),
            s(&f.p("world")).into(),
            "--model".into(),
            s(&f.p("boot/checkpoint.abce")).into(),
            "--out".into(),
            s(out).into(),
        ];
        a.extend(extra.iter().map(|e| e.to_string()));
        a
    };
    let strict = args(&dir.path().join("strict"), &[]);
    let o = abc(&strict.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--allow-fewer"), "{}", stderr(&o));
    let lenient = args(&dir.path().join("lenient"), &["--allow-fewer"]);
    ok(abc(&lenient.iter().map(String::as_str).collect::<Vec<_>>()));
    assert!(dir.path().join("lenient/mined.jsonl").is_file());
}

#[test]
fn reruns_are_byte_identical_and_inputs_untouched() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let snapshot = |p: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let world_before = snapshot(&f.p("world"));
    let mined_before = fs::read(f.p("mined/mined.jsonl")).unwrap();
    let out = dir.path().join("stage1");
    let run = |_: ()| {
        ok(abc(&[
            "pretrain", "--config", s(&f.p("s1.json")), "--corpus", s(&f.p("world")), "--mined",
            s(&f.p("mined/mined.jsonl")), "--out", s(&out),
        ]))
    };
    run(());
    let first = (fs::read(out.join("checkpoint.abce")).unwrap(), fs::read(out.join("metrics.jsonl")).unwrap());
    let mut meta_first = read_json(&out.join("run.json"));
    run(());
    let second = (fs::read(out.join("checkpoint.abce")).unwrap(), fs::read(out.join("metrics.jsonl")).unwrap());
    let mut meta_second = read_json(&out.join("run.json"));
    assert!(first == second, "rerun changed checkpoint or metrics");
    meta_first["wall_time_s"] = Value::Null;
    meta_second["wall_time_s"] = Value::Null;
    assert_eq!(meta_first, meta_second);
    // Same inputs as the fixture's stage 1, so the same checkpoint.
    assert!(first.0 == fs::read(f.p("stage1/checkpoint.abce")).unwrap());

    assert!(world_before == snapshot(&f.p("world")));
    assert!(mined_before == fs::read(f.p("mined/mined.jsonl")).unwrap());

    let w1 = dir.path().join("w1");
    let w2 = dir.path().join("w2");
    ok(abc(&["gen-world", "--config", s(&f.p("world.json")), "--out", s(&w1)]));
    ok(abc(&["gen-world", "--config", s(&f.p("world.json")), "--out", s(&w2)]));
    let strip = |mut v: Vec<(String, Vec<u8>)>| {
        v.retain(|(n, _)| n != "run.json");
        v
    };
    assert!(strip(snapshot(&w1)) == strip(snapshot(&w2)));
    assert!(strip(snapshot(&w1)) == strip(world_before));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("boot");
    ok(abc(&[
        "bootstrap", "--config", s(&f.p("boot.json")), "--seed", "9", "--corpus", s(&f.p("world")), "--out", s(&out),
    ]));
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["seed"], 9);
    assert_eq!(run["config"]["seed"], 9);
    assert!(fs::read(out.join("checkpoint.abce")).unwrap() != fs::read(f.p("boot/checkpoint.abce")).unwrap());
}

#[test]
fn experiment_harnesses_emit_reports() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let world = s(&f.p("world")).to_string();
    let mined = s(&f.p("mined/mined.jsonl")).to_string();
    let pretrain = train("1", 4);

    let cfg = dir.path().join("tau.json");
    write_json(&cfg, &json!({"pretrain": pretrain, "seeds": [1, 2]}));
    let out = dir.path().join("tau");
    ok(abc(&[
        "exp-tau", "--config", s(&cfg), "--corpus", &world, "--mined", &mined, "--model",
        s(&f.p("boot/checkpoint.abce")), "--out", s(&out),
    ]));
    let r = read_json(&out.join("tau_report.json"));
    let pairs = r["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 2);
    for p in pairs {
        assert_eq!(p["mined"]["steps"].as_array().unwrap().len(), 4);
        assert_eq!(p["random"]["steps"].as_array().unwrap().len(), 4);
    }

    let cfg = dir.path().join("arch.json");
    write_json(
        &cfg,
        &json!({"pretrain": pretrain, "attn_modes": ["causal", "bidirectional"], "lora_ranks": [2, 4, 8]}),
    );
    let out = dir.path().join("arch");
    ok(abc(&["exp-arch", "--config", s(&cfg), "--corpus", &world, "--mined", &mined, "--out", s(&out)]));
    let r = read_json(&out.join("arch_report.json"));
    assert_eq!(r["rows"].as_array().unwrap().len(), 6);

    let cfg = dir.path().join("scaling.json");
    write_json(&cfg, &json!({"pretrain": pretrain, "batch_factor": 2, "doubling_runs": 2}));
    let out = dir.path().join("scaling");
    ok(abc(&["exp-scaling", "--config", s(&cfg), "--corpus", &world, "--mined", &mined, "--out", s(&out)]));
    let r = read_json(&out.join("scaling_report.json"));
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["samples_seen"], rows[1]["samples_seen"]);
    let table = fs::read_to_string(out.join("scaling.md")).unwrap();
    assert_eq!(table.lines().count(), 2 + rows.len());
}
