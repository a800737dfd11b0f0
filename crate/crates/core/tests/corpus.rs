use std::fs;
use std::path::Path;

use abc_core::corpus::{
    generate_ctrlbench, generate_world, validate_corpus, write_ctrlbench, Corpus, CorpusError, Split, WorldConfig,
    CAPTIONS_FILE, IMAGES_FILE, INSTRUCTIONS_FILE,
};

fn cfg() -> WorldConfig {
    WorldConfig {
        n_images: 60,
        n_bench_images: 20,
        n_aspects: 4,
        salient_aspects: 2,
        values_per_aspect: 10,
        value_len: 2,
        paraphrases_per_aspect: 3,
        paraphrase_len: 2,
        noise_tokens_per_image: 3,
        noise_vocab: 8,
        seed: 17,
    }
}

fn written(dir: &Path) -> Corpus {
    let c = generate_world(&cfg()).unwrap();
    c.write(dir).unwrap();
    write_ctrlbench(dir, &generate_ctrlbench(&c, 20).unwrap()).unwrap();
    c
}

fn violation_line(err: CorpusError) -> (String, usize) {
    match err {
        CorpusError::Violation { file, line, .. } => (file, line),
        other => panic!("expected a violation, got {other}"),
    }
}

#[test]
fn fresh_world_validates() {
    let dir = tempfile::tempdir().unwrap();
    written(dir.path());
    let s = validate_corpus(dir.path()).unwrap();
    assert_eq!((s.images, s.captions, s.instructions, s.bench_records), (60, 240, 720, Some(80)));
}

#[test]
fn round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = written(dir.path());
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
}

#[test]
fn files_are_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    written(a.path());
    written(b.path());
    for f in [IMAGES_FILE, CAPTIONS_FILE, INSTRUCTIONS_FILE, "ctrlbench.jsonl", "world.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn duplicated_caption_is_reported_at_its_line() {
    let dir = tempfile::tempdir().unwrap();
    written(dir.path());
    let path = dir.path().join(CAPTIONS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // copy line 1's tokens into line 6 (another image, same aspect shape)
    let mut first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    let sixth: serde_json::Value = serde_json::from_str(&lines[5]).unwrap();
    first["id"] = sixth["id"].clone();
    first["image_id"] = sixth["image_id"].clone();
    first["aspect"] = sixth["aspect"].clone();
    lines[5] = first.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let (file, line) = violation_line(validate_corpus(dir.path()).unwrap_err());
    assert_eq!((file.as_str(), line), (CAPTIONS_FILE, 6));
}

#[test]
fn tampered_aspect_count_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    written(dir.path());
    let path = dir.path().join(CAPTIONS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    let err = validate_corpus(dir.path()).unwrap_err();
    assert!(err.to_string().contains("has 3 captions, expected 4"), "{err}");
}

#[test]
fn malformed_line_gives_parse_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    written(dir.path());
    let path = dir.path().join(INSTRUCTIONS_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": oops}\n");
    fs::write(&path, text).unwrap();
    let err = validate_corpus(dir.path()).unwrap_err();
    assert!(err.to_string().contains(":721:"), "{err}");
}

#[test]
fn held_out_paraphrases_never_in_train_split() {
    let c = generate_world(&cfg()).unwrap();
    let held_out = c.config.held_out_paraphrase();
    let train_tokens: std::collections::BTreeSet<_> = c
        .instructions
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(|i| i.tokens.clone())
        .collect();
    for i in c.instructions.iter().filter(|i| i.paraphrase == held_out) {
        assert!(!train_tokens.contains(&i.tokens));
        assert_ne!(i.split, Split::Train);
    }
}
