mod common;

use serde_json::Value;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn kvret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvret")).args(args).env_remove("KVRET_DATA_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kvret(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = kvret(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_flag_exits_2_and_help_exits_0() {
    assert_eq!(kvret(&["train", "--nonsense"]).status.code(), Some(2));
    assert_eq!(kvret(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let out = kvret(&["preprocess"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("KVRET_DATA_DIR"));
}

#[test]
fn preprocess_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.json");
    ok(&["synth", "--out", p(&corpus), "--dialogues", "40", "--seed", "3"]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["preprocess", "--corpus", p(&corpus), "--out", p(&a), "--seed", "9"]);
    ok(&["preprocess", "--corpus", p(&corpus), "--out", p(&b), "--seed", "9"]);
    for file in ["train.json", "validation.json", "test.json", "vocab.json", "lexicon.json", "splits.json"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
}

#[test]
fn train_then_eval_on_an_overfit_toy_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy.json");
    std::fs::write(&corpus, common::toy_corpus_json()).unwrap();
    let data = dir.path().join("prepared");
    ok(&["preprocess", "--corpus", p(&corpus), "--out", p(&data)]);

    let config = dir.path().join("train.toml");
    std::fs::write(&config, "dim = 24\nepochs = 120\nlearning_rate = 3e-3\ndropout_keep = 1.0\nl2 = 0.0\npatience = 0\nmax_decode_len = 12\nseed = 1\n").unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&run)]);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 120);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_loss", "val_bleu", "val_entity_f1"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let preds = dir.path().join("preds.jsonl");
    let ckpt = run.join("best.ckpt");
    let out = ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--split", "train", "--predictions", p(&preds)]);
    let scores: Value = serde_json::from_str(out.trim()).unwrap();
    for key in ["bleu", "entity_f1", "scheduling_f1", "weather_f1", "navigation_f1"] {
        assert!(scores[key].is_number(), "missing {key}: {scores}");
    }
    assert_eq!(scores["entity_f1"], 1.0, "{scores}");
    assert!(std::fs::read_to_string(&preds).unwrap().lines().count() > 0);
}

#[test]
fn chat_reads_turns_from_stdin() {
    let (_, ckpt) = common::toy_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb.json");
    std::fs::write(&kb, common::meeting_kb().to_string()).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_kvret"))
        .args(["chat", "--ckpt", p(ckpt), "--kb", p(&kb), "--show-canonical"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"what time is my meeting\n/quit\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let reply = stdout.lines().find(|l| l.contains("bot> ")).unwrap();
    assert!(reply.contains("5pm"), "{stdout}");
    assert!(stdout.contains("meeting_time"), "{stdout}");
}

#[test]
fn chat_rejects_a_malformed_kb() {
    let (_, ckpt) = common::toy_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb.json");
    std::fs::write(&kb, r#"{"columns": ["event", "time"], "rows": [["a"]]}"#).unwrap();
    let out = kvret(&["chat", "--ckpt", p(ckpt), "--kb", p(&kb)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 0"));
}
