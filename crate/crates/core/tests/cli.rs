use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chair_core::cli::RunManifest;
use chair_core::util::sha256_file;
use tempfile::TempDir;

fn chair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chair")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = chair(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    train_cfg: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let synth_cfg = dir.path().join("synth.json");
        std::fs::write(&synth_cfg, r#"{"num_classes": 8, "num_concepts": 6, "input_dim": 12, "samples_per_class": 10}"#).unwrap();
        let train_cfg = dir.path().join("train.json");
        std::fs::write(&train_cfg, r#"{"stage1_epochs": 3, "stage2_epochs": 2, "batch_size": 16, "hidden": 16, "embed_dim": 8}"#).unwrap();
        let data = dir.path().join("data.jsonl");
        ok(&["synth", "--config", s(&synth_cfg), "--out", s(&data)]);
        Fixture { dir, data, train_cfg }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["train", "--data", s(&self.data), "--config", s(&self.train_cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn data_lines(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--out", s(&a)]);
    ok(&["synth", "--out", s(&b)]);
    ok(&["synth", "--seed", "2", "--out", s(&c)]);
    assert_eq!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());
    assert_ne!(sha256_file(&a).unwrap(), sha256_file(&c).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 32 * 30);
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.seed, Some(1));
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let out = chair(&["synth", "--config", "/nonexistent/cfg.json", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/cfg.json"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(chair(&["train"]).status.code(), Some(2));
    assert_eq!(chair(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_eval_grid_export_pipeline() {
    let f = Fixture::new();
    let ck = f.train("model.ck", &[]);
    let report = std::fs::read_to_string(f.path("model.ck.report.csv")).unwrap();
    assert!(report.starts_with("# manifest_sha256="));
    // header plus one row per epoch of each stage
    assert_eq!(data_lines(&report).len(), 1 + 3 + 2);

    let eval = f.path("eval.csv");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&f.data), "--fraction", "0,0.5,1", "--seed", "1,2", "--out", s(&eval)]);
    let text = std::fs::read_to_string(&eval).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "seed,fraction,k,recall_at_k,recall_accuracy_at_k");
    assert_eq!(lines.len(), 1 + 2 * 3 * 3);
    for row in &lines[1..] {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((0.0..=1.0).contains(&v[3]) && (0.0..=1.0).contains(&v[4]));
        assert!(v[4] <= v[3]);
    }

    let grid = f.path("grid.csv");
    ok(&["grid", "--checkpoint", s(&ck), "--data", s(&f.data), "--seed", "1", "--out", s(&grid)]);
    let text = std::fs::read_to_string(&grid).unwrap();
    assert!(text.starts_with("# manifest_sha256="));
    assert_eq!(text.lines().count(), 1 + 1 + 25);

    let emb = f.path("emb.csv");
    ok(&["export", "--checkpoint", s(&ck), "--data", s(&f.data), "--out", s(&emb)]);
    let text = std::fs::read_to_string(&emb).unwrap();
    assert_eq!(data_lines(&text).len(), 1 + 40);
    assert!(f.path("emb.csv.manifest.json").exists());
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint() {
    let f = Fixture::new();
    let out = f.path("s2.ck");
    let r = chair(&["train", "--data", s(&f.data), "--config", s(&f.train_cfg), "--stages", "2", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("stage-1 checkpoint"));
    assert!(!out.exists());

    let s1 = f.train("s1.ck", &["--stages", "1"]);
    let s12 = f.train("s12.ck", &["--stages", "2", "--checkpoint", s(&s1)]);
    let r = chair(&["train", "--data", s(&f.data), "--config", s(&f.train_cfg), "--stages", "2", "--checkpoint", s(&s12), "--out", s(&f.path("again.ck"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("already completed stage 2"));
}

#[test]
fn classification_protocol_round_trip() {
    let f = Fixture::new();
    let ck = f.train("cls.ck", &["--protocol", "classification"]);
    let out = f.path("acc.csv");
    ok(&["eval", "--task", "classification", "--checkpoint", s(&ck), "--data", s(&f.data), "--fraction", "0,1", "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "seed,fraction,accuracy");
    assert_eq!(lines.len(), 3);

    let retrieval_ck = f.train("ret.ck", &["--kind", "standard"]);
    let r = chair(&["eval", "--task", "classification", "--checkpoint", s(&retrieval_ck), "--data", s(&f.data), "--out", s(&f.path("bad.csv"))]);
    assert_ne!(r.status.code(), Some(0));
}

#[test]
fn mismatched_dataset_is_rejected() {
    let f = Fixture::new();
    let ck = f.train("model.ck", &[]);
    let other = f.path("other.jsonl");
    let cfg = f.path("other.json");
    std::fs::write(&cfg, r#"{"num_classes": 8, "num_concepts": 5, "input_dim": 12, "samples_per_class": 10}"#).unwrap();
    ok(&["synth", "--config", s(&cfg), "--out", s(&other)]);
    let r = chair(&["eval", "--checkpoint", s(&ck), "--data", s(&other), "--out", s(&f.path("e.csv"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("5 concepts"));
}

#[test]
fn reruns_reproduce_every_artifact() {
    let f = Fixture::new();
    let mut hashes = Vec::new();
    for tag in ["a", "b"] {
        let ck = f.train(&format!("{tag}.ck"), &["--seed", "4"]);
        let eval = f.path(&format!("{tag}.eval.csv"));
        let grid = f.path(&format!("{tag}.grid.csv"));
        ok(&["eval", "--checkpoint", s(&ck), "--data", s(&f.data), "--fraction", "0,1", "--out", s(&eval)]);
        ok(&["grid", "--checkpoint", s(&ck), "--data", s(&f.data), "--grid-fractions", "0,1", "--seed", "1,2", "--out", s(&grid)]);
        hashes.push([ck, eval, grid].map(|p| sha256_file(&p).unwrap()));
    }
    assert_eq!(hashes[0], hashes[1]);
}
