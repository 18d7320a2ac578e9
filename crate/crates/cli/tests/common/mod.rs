#![allow(dead_code)]

use kvret_core::checkpoint::Checkpoint;
use kvret_core::corpus::{parse_corpus, LoadedCorpus};
use kvret_core::data::{preprocess, Dataset};
use kvret_core::trainer::{evaluate, train, TrainConfig};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::OnceLock;

fn schedule(id: &str, rows: &[(&str, &str, &str)], ask: &str) -> Value {
    let items: Vec<Value> = rows.iter().map(|(e, t, p)| json!({"event": e, "time": t, "party": p})).collect();
    let (_, time, party) = rows.iter().find(|r| r.0 == ask).unwrap();
    json!({
        "scenario": {"uuid": id, "task": {"intent": "schedule"}, "kb": {"column_names": ["event", "time", "party"], "items": items}},
        "dialogue": [
            {"turn": "driver", "data": {"utterance": format!("what time is my {ask}")}},
            {"turn": "assistant", "data": {"utterance": format!("your {ask} is at {time}.")}},
            {"turn": "driver", "data": {"utterance": "who is going?"}},
            {"turn": "assistant", "data": {"utterance": format!("your {party} is going.")}}
        ]
    })
}

/// Schedule dialogues about a meeting and a dinner over varying KBs.
pub fn toy_corpus() -> Vec<Value> {
    let times = ["5pm", "9am", "11am", "2pm", "7pm", "10am", "3pm", "6pm"];
    let parties = ["boss", "sister", "father", "Ana"];
    (0..8)
        .map(|i| {
            let rows = [("meeting", times[i], parties[i % 4]), ("dinner", times[(i + 3) % 8], parties[(i + 1) % 4])];
            schedule(&format!("toy-{i}"), &rows, if i % 2 == 0 { "meeting" } else { "dinner" })
        })
        .collect()
}

pub fn toy_corpus_json() -> String {
    serde_json::to_string_pretty(&toy_corpus()).unwrap()
}

/// A checkpoint trained on [`toy_corpus`] until it reproduces its training responses.
pub fn toy_checkpoint() -> &'static (Checkpoint, PathBuf) {
    static CKPT: OnceLock<(Checkpoint, PathBuf)> = OnceLock::new();
    CKPT.get_or_init(|| {
        let (dialogues, _) = parse_corpus(&toy_corpus_json()).unwrap();
        let corpus = preprocess(LoadedCorpus { dialogues: dialogues.clone(), manifest: None, errors: vec![] }, 0, 1);
        let all: Vec<_> = corpus.train.iter().chain(&corpus.validation).chain(&corpus.test).cloned().collect();
        let vocab = {
            let stores: Vec<_> = all.iter().map(|d| kvret_core::kbstore::normalize_for_domain(&d.kb, d.domain).unwrap()).collect();
            kvret_core::corpus::Vocabulary::build(&all, &stores, 1)
        };
        let ds = Dataset::new(&all, &vocab, &corpus.lexicon).unwrap();
        let config = TrainConfig { dim: 24, epochs: 120, learning_rate: 3e-3, dropout_keep: 1.0, l2: 0.0, patience: 0, max_decode_len: 12, seed: 1, ..Default::default() };
        let out = train(&ds, &ds, &vocab, &corpus.lexicon, &config, None).unwrap();
        let eval = evaluate(&out.params, &out.model, &vocab, &ds, 12).unwrap();
        assert_eq!(eval.scores.entity_f1, 1.0, "toy model failed to fit its corpus");
        let ckpt = Checkpoint { model: out.model, train: Some(config), vocab, lexicon: corpus.lexicon, params: out.params };
        let dir = std::env::temp_dir().join(format!("kvret-toy-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.ckpt");
        ckpt.save(&path).unwrap();
        (ckpt, path)
    })
}

pub fn meeting_kb() -> Value {
    json!({"column_names": ["event", "time", "party"], "items": [
        {"event": "dinner", "time": "8pm", "party": "sister"},
        {"event": "meeting", "time": "5pm", "party": "boss"}
    ]})
}
