use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use simcse_cli::run;

fn kit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simcse-kit"))
}

fn run_ok(args: &[&str]) {
    let mut argv = vec!["simcse-kit"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv), 0, "command failed: {args:?}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small toy corpus plus a config for a short run.
fn setup(dir: &Path) -> PathBuf {
    let toy = dir.join("toy");
    run_ok(&[
        "gen-toy",
        "--out",
        p(&toy),
        "--clusters",
        "4",
        "--per-cluster",
        "20",
        "--vocab-size",
        "64",
        "--probe-per-cluster",
        "4",
        "--probe-pairs",
        "32",
    ]);
    let config = dir.join("train.json");
    fs::write(
        &config,
        r#"{
            "batch_size": 8,
            "max_steps": 6,
            "steps_per_eval": 2,
            "encoder": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_len": 16},
            "data": {"corpus": "toy/corpus.txt", "vocab": "toy/vocab.json", "probes": "toy/sts/manifest.json"}
        }"#,
    )
    .unwrap();
    config
}

#[test]
fn gen_toy_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let toy = dir.path().join("toy");
    for f in ["corpus.txt", "vocab.json", "triplets.tsv", "sts/manifest.json", "toy.json"] {
        assert!(toy.join(f).exists(), "{f}");
    }
    let corpus = fs::read_to_string(toy.join("corpus.txt")).unwrap();
    assert_eq!(corpus.lines().count(), 80);
}

#[test]
fn train_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for out in [&a, &b] {
        run_ok(&["train", "--config", p(&config), "--seed", "7", "--out", p(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log_a = fs::read_to_string(dir.path().join("a.ckpt.trajectory.csv")).unwrap();
    let log_b = fs::read_to_string(dir.path().join("b.ckpt.trajectory.csv")).unwrap();
    assert_eq!(log_a, log_b);
    let mut lines = log_a.lines();
    assert!(lines.next().unwrap().starts_with("# config="));
    assert_eq!(lines.next().unwrap(), "step,loss,align,uniform,sigma_max_ratio");
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, vec!["0", "2", "4", "6"]);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    run_ok(&["train", "--config", p(&config), "--out", p(&a)]);
    run_ok(&[
        "train",
        "--config",
        p(&config),
        "--out",
        p(&b),
        "--dropout-mode",
        "none",
        "--max-steps",
        "3",
    ]);
    let log = fs::read_to_string(dir.path().join("b.ckpt.trajectory.csv")).unwrap();
    assert!(log.contains(r#""dropout":"none""#));
    assert_eq!(log.lines().last().unwrap().split(',').next().unwrap(), "3");
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn eval_and_analyze_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    run_ok(&["train", "--config", p(&config), "--out", p(&ckpt)]);
    let manifest = dir.path().join("toy/sts/manifest.json");
    let mut evals = Vec::new();
    let mut reports = Vec::new();
    for k in 0..2 {
        let e = dir.path().join(format!("eval{k}.json"));
        run_ok(&[
            "eval-sts",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&manifest),
            "--metric",
            "spearman",
            "--agg",
            "all",
            "--out",
            p(&e),
        ]);
        evals.push(fs::read(&e).unwrap());
        let r = dir.path().join(format!("report{k}.json"));
        run_ok(&["analyze", "--checkpoint", p(&ckpt), "--probes", p(&manifest), "--out", p(&r)]);
        reports.push((
            fs::read(&r).unwrap(),
            fs::read(dir.path().join(format!("report{k}.json.density.csv"))).unwrap(),
        ));
    }
    assert_eq!(evals[0], evals[1]);
    assert_eq!(reports[0], reports[1]);
    let doc: Value = serde_json::from_slice(&evals[0]).unwrap();
    assert!(doc["aggregate"].as_f64().unwrap().abs() <= 1.0);
    assert_eq!(doc["per_subset"].as_array().unwrap().len(), 3);
    let report: Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert!(report["report"]["jensen_gap"].as_f64().unwrap() >= 0.0);
    let csv = String::from_utf8(reports[0].1.clone()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "band,bin_left,bin_right,count");
}

#[test]
fn supervised_training_from_triplets() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let config = dir.path().join("sup.json");
    fs::write(
        &config,
        r#"{
            "batch_size": 8, "max_steps": 3,
            "objective": {"kind": "supervised_hard_neg"},
            "encoder_mode": "dual",
            "encoder": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_len": 16},
            "data": {"triplets": "toy/triplets.tsv", "vocab": "toy/vocab.json"}
        }"#,
    )
    .unwrap();
    let ckpt = dir.path().join("sup.ckpt");
    run_ok(&["train", "--config", p(&config), "--out", p(&ckpt)]);
    let manifest = dir.path().join("toy/sts/manifest.json");
    run_ok(&["eval-sts", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--agg", "wmean"]);
}

#[test]
fn augment_rewrites_each_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "the cat sat on the mat today\nhello\n").unwrap();
    let out = dir.path().join("out.txt");
    run_ok(&[
        "augment", "--corpus", p(&corpus), "--op", "delete-one-word", "--out", p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split_whitespace().count(), 6);
    assert_eq!(lines[1], "hello");

    let syn = dir.path().join("syn.json");
    fs::write(&syn, r#"{"cat": ["feline"]}"#).unwrap();
    run_ok(&[
        "augment", "--corpus", p(&corpus), "--op", "synonym", "--synonyms", p(&syn), "--out", p(&out),
    ]);
    assert!(fs::read_to_string(&out).unwrap().starts_with("the feline sat"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let status = kit().arg("no-such-command").output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    let status = kit().args(["train"]).output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    assert_eq!(kit().arg("--help").output().unwrap().status.code(), Some(0));

    // invalid config value
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"batch_size": 1, "data": {"corpus": "c.txt"}}"#).unwrap();
    fs::write(dir.path().join("c.txt"), "a b\nc d\n").unwrap();
    let out = kit()
        .args(["train", "--config", p(&config), "--out", p(&dir.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    // unknown config field
    fs::write(&config, r#"{"batch_sise": 4, "data": {"corpus": "c.txt"}}"#).unwrap();
    let out = kit()
        .args(["train", "--config", p(&config), "--out", p(&dir.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // missing checkpoint is a runtime error
    let out = kit()
        .args([
            "eval-sts",
            "--checkpoint",
            p(&dir.path().join("missing.ckpt")),
            "--manifest",
            p(&dir.path().join("m.json")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let mut files = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}.ckpt"));
        let status = kit()
            .env("SIMCSE_KIT_THREADS", threads)
            .args(["train", "--config", p(&config), "--out", p(&out)])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        files.push(fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
}
