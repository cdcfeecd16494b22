//! End-to-end runs of the `complm` binary on a tiny generated dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[lm]
width = 16
layers = 1
[lm_train]
epochs = 1
batch_size = 16
[composite]
ctx_width = 16
embed_width = 8
act_width = 8
att_width = 8
[training]
epoch_updates = 4
batch_size = 8
pretrain_epochs = 1
main_epochs = 1
[synth]
default_train = 200
composite_train = 100
dev = 20
test = 20
nbest_dev = 6
nbest_test = 8
nbest_size = 4
locations = 20
persons = 20
contacts = 10
users = 3
contacts_per_user = 3
"#;

fn complm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_complm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "tiny.toml", "--threads", "2"])
        .args(args)
        .output()
        .expect("spawn complm")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = complm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

/// Builds data, vocabulary, components and a composite in `dir`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(dir, &["synth", "--out", "data"]);
    ok(
        dir,
        &[
            "build-vocab",
            "--corpus",
            "data/default-train.txt",
            "--corpus",
            "data/composite-train.txt",
            "--size",
            "150",
            "--out",
            "vocab.json",
        ],
    );
    ok(dir, &["fst-build", "--entities", "data/entities/location.tsv", "--vocab", "vocab.json", "--out", "loc.fst"]);
    ok(dir, &["train-lm", "--corpus", "data/default-train.txt", "--vocab", "vocab.json", "--out", "default.ckpt"]);
    ok(
        dir,
        &[
            "train-composite",
            "--default",
            "default.ckpt",
            "--component",
            "loc.fst",
            "--vocab",
            "vocab.json",
            "--corpus",
            "data/composite-train.txt",
            "--dev",
            "data/dev.txt",
            "--out",
            "run",
        ],
    );
}

#[test]
fn pipeline_produces_artifacts_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);

    for f in ["best.ckpt", "epoch-1.ckpt", "epoch-2.ckpt", "manifest.json", "train.log.jsonl"] {
        assert!(dir.join("run").join(f).is_file(), "missing run/{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train-composite");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 5);
    assert!(manifest["inputs"].as_array().unwrap().iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    let log = fs::read_to_string(dir.join("run/train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let out = ok(dir, &["eval-ppl", "--model", "run/best.ckpt", "--corpus", "data/test.txt"]);
    assert_eq!(out.lines().count(), 1);
    let ppl: f64 = out.trim().parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0 && ppl < 150.0, "{ppl}");

    let out = ok(dir, &["eval-ppl", "--model", "default.ckpt", "--vocab", "vocab.json", "--corpus", "data/test.txt"]);
    assert!(out.trim().parse::<f64>().unwrap() > 1.0);

    let out = ok(dir, &["scatter", "--model", "run/best.ckpt", "--corpus", "data/test.txt"]);
    assert_eq!(out.lines().next(), Some("sentence\tll_composite\tll_default"));
    assert_eq!(out.lines().count(), 21);

    let out = ok(
        dir,
        &[
            "rescore",
            "--model",
            "run/best.ckpt",
            "--nbest",
            "data/nbest.test.tsv",
            "--refs",
            "data/nbest.test.refs.tsv",
            "--dev-nbest",
            "data/nbest.dev.tsv",
            "--dev-refs",
            "data/nbest.dev.refs.tsv",
            "--out",
            "chosen.tsv",
        ],
    );
    assert!(out.starts_with("system\tsubset\t"));
    assert!(out.lines().any(|l| l.starts_with("oracle\tall\t")));
    assert_eq!(fs::read_to_string(dir.join("chosen.tsv")).unwrap().lines().count(), 8);
}

#[test]
fn trace_has_one_row_per_token() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let sentence = "what is the weather in paris";
    let vocab = complm::vocab::Vocabulary::load(dir.join("vocab.json")).unwrap();
    // Every token of the sentence plus the end-of-sentence step.
    let tokens = vocab.encode(sentence).len();
    let out = ok(dir, &["trace", "--model", "run/best.ckpt", "--sentence", sentence]);
    let mut lines = out.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("sentence\tposition\ttoken\talpha_0"));
    let rows = lines.count();
    assert!(rows == tokens || rows == tokens + 1, "{rows} rows for {tokens} tokens");

    let out = ok(dir, &["trace", "--model", "run/best.ckpt", "--sentence", sentence, "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v.is_array());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(dir, &["synth", "--out", "a"]);
    ok(dir, &["synth", "--out", "b"]);
    ok(dir, &["--seed", "2", "synth", "--out", "c"]);
    let read = |d: &str| fs::read(dir.join(d).join("test.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.toml"), TINY).unwrap();

    let out = complm(dir, &["eval-ppl", "--model", "missing.ckpt", "--corpus", "x.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: usage: "));

    let out = complm(dir, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.join("bad.toml"), "[training]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_complm"))
        .current_dir(dir)
        .args(["--config", "bad.toml", "synth", "--out", "d"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.join("garbage.ckpt"), "not a checkpoint").unwrap();
    fs::write(dir.join("c.txt"), "hello\n").unwrap();
    let out = complm(dir, &["eval-ppl", "--model", "garbage.ckpt", "--corpus", "c.txt"]);
    assert_eq!(out.status.code(), Some(2));
}
