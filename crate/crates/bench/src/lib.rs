//! Fixtures shared by the benchmarks.

use kvret_core::corpus::{parse_corpus, LoadedCorpus};
use kvret_core::data::{preprocess, Dataset, PreparedCorpus};
use kvret_core::metrics::EvalPair;
use kvret_core::network::{ModelConfig, ModelParams};
use kvret_core::synth;

pub struct Fixture {
    pub corpus: PreparedCorpus,
    pub train: Dataset,
    pub model: ModelConfig,
    pub params: ModelParams,
}

/// A synthetic corpus of `dialogues` dialogues and a model of width `dim`.
pub fn fixture(dialogues: usize, dim: usize) -> Fixture {
    let (parsed, _) = parse_corpus(&synth::to_json(&synth::generate(dialogues, 1))).expect("synthetic corpus parses");
    let corpus = preprocess(LoadedCorpus { dialogues: parsed, ..Default::default() }, 0, 1);
    let train = Dataset::new(&corpus.train, &corpus.vocab, &corpus.lexicon).expect("synthetic KBs normalize");
    let model = ModelConfig::new(dim, &corpus.vocab);
    let params = ModelParams::init(dim, corpus.vocab.len(), 0);
    Fixture { corpus, train, model, params }
}

/// Pairs whose predictions are the gold responses with every third token replaced.
pub fn eval_pairs(fixture: &Fixture) -> Vec<EvalPair> {
    fixture
        .train
        .examples
        .iter()
        .map(|e| {
            let predicted = e.gold.iter().enumerate().map(|(i, t)| if i % 3 == 2 { "<unk>".to_string() } else { t.clone() }).collect();
            EvalPair::new(e.gold.clone(), predicted, e.domain)
        })
        .collect()
}
