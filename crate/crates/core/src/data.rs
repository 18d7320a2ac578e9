//! Preprocessing pipeline and training examples.
//!
//! Raw dialogues are split, their entity mentions canonicalized against
//! their own KB, and a vocabulary built from the training split. Each
//! assistant turn then becomes one example whose context is every earlier
//! turn of the dialogue.

use crate::corpus::{canonicalize, split, Dialogue, Domain, Lexicon, LoadedCorpus, Speaker, SplitManifest, Splits, Vocabulary};
use crate::kbstore::{normalize_for_domain, KbError, TripleStore};
use crate::network::KbPlan;
use serde::{de::DeserializeOwned, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const DEFAULT_MIN_COUNT: usize = 1;

/// Dialogue with every turn canonicalized against its normalized KB.
pub fn canonicalize_dialogue(d: &Dialogue, lexicon: &Lexicon) -> Result<(Dialogue, TripleStore), KbError> {
    let store = normalize_for_domain(&d.kb, d.domain)?;
    let mut out = d.clone();
    for turn in &mut out.turns {
        turn.tokens = canonicalize(&turn.tokens, lexicon, &store);
    }
    Ok((out, store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

/// Canonicalized splits with the lexicon and vocabulary built from them.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub train: Vec<Dialogue>,
    pub validation: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub manifest: SplitManifest,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Kb(#[from] KbError),
}

const FILES: [&str; 6] = ["train.json", "validation.json", "test.json", "lexicon.json", "vocab.json", "splits.json"];

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text + "\n").map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

/// Splits (following the corpus manifest when it has one), builds the
/// lexicon from training and validation text, canonicalizes, and builds the
/// vocabulary from the training split. Dialogues whose KB cannot be
/// normalized are skipped and reported.
pub fn preprocess(corpus: LoadedCorpus, seed: u64, min_count: usize) -> PreparedCorpus {
    let splits = match &corpus.manifest {
        Some(m) => Splits::from_manifest(corpus.dialogues, m),
        None => split(corpus.dialogues, seed),
    };
    let lexicon = Lexicon::build(splits.train.iter().chain(&splits.validation), &[]);
    let mut skipped = Vec::new();
    let mut convert = |ds: &[Dialogue]| {
        let mut dialogues = Vec::with_capacity(ds.len());
        let mut stores = Vec::with_capacity(ds.len());
        for d in ds {
            match canonicalize_dialogue(d, &lexicon) {
                Ok((c, s)) => {
                    dialogues.push(c);
                    stores.push(s);
                }
                Err(e) => {
                    log::warn!("skipping dialogue {}: {e}", d.id);
                    skipped.push(Skipped { id: d.id.clone(), reason: e.to_string() });
                }
            }
        }
        (dialogues, stores)
    };
    let (train, train_stores) = convert(&splits.train);
    let (validation, _) = convert(&splits.validation);
    let (test, _) = convert(&splits.test);
    let vocab = Vocabulary::build(&train, &train_stores, min_count);
    let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.id.clone()).collect();
    let manifest = SplitManifest { train: ids(&train), dev: ids(&validation), test: ids(&test) };
    PreparedCorpus { train, validation, test, lexicon, vocab, manifest, skipped }
}

impl PreparedCorpus {
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        write_json(&dir.join(FILES[0]), &self.train)?;
        write_json(&dir.join(FILES[1]), &self.validation)?;
        write_json(&dir.join(FILES[2]), &self.test)?;
        write_json(&dir.join(FILES[3]), &self.lexicon)?;
        write_json(&dir.join(FILES[4]), &self.vocab)?;
        write_json(&dir.join(FILES[5]), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Ok(Self {
            train: read_json(&dir.join(FILES[0]))?,
            validation: read_json(&dir.join(FILES[1]))?,
            test: read_json(&dir.join(FILES[2]))?,
            lexicon: read_json(&dir.join(FILES[3]))?,
            vocab: read_json(&dir.join(FILES[4]))?,
            manifest: read_json(&dir.join(FILES[5]))?,
            skipped: Vec::new(),
        })
    }
}

/// One assistant turn to be predicted from everything said before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub dialogue: usize,
    pub turn: usize,
    pub context: Vec<usize>,
    pub response: Vec<usize>,
    /// The response as canonical tokens, before vocabulary lookup.
    pub gold: Vec<String>,
    pub domain: Domain,
}

/// Encoded examples with the KB plan of each source dialogue.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub plans: Vec<KbPlan>,
    pub stores: Vec<TripleStore>,
    entity_tokens: HashSet<String>,
}

/// Concatenated tokens of `turns`, as in the encoder context.
pub fn context_tokens(turns: &[crate::corpus::Turn]) -> Vec<String> {
    turns.iter().flat_map(|t| t.tokens.iter().cloned()).collect()
}

impl Dataset {
    /// Builds examples from canonicalized dialogues. Empty assistant turns
    /// and turns with no preceding context are left out.
    pub fn new(dialogues: &[Dialogue], vocab: &Vocabulary, lexicon: &Lexicon) -> Result<Self, KbError> {
        let mut ds = Dataset::default();
        ds.entity_tokens.extend(vocab.tokens()[vocab.base_len()..].iter().cloned());
        ds.entity_tokens.extend(lexicon.entities().map(|(e, _)| e.replace(' ', "_")));
        for (di, d) in dialogues.iter().enumerate() {
            let store = normalize_for_domain(&d.kb, d.domain)?;
            ds.entity_tokens.extend(store.triples().iter().filter(|t| !t.is_missing()).map(|t| t.canonical_token.clone()));
            ds.plans.push(KbPlan::new(&store, vocab));
            ds.stores.push(store);
            for (ti, turn) in d.turns.iter().enumerate() {
                if turn.speaker != Speaker::Assistant || turn.tokens.is_empty() {
                    continue;
                }
                let context = context_tokens(&d.turns[..ti]);
                if context.is_empty() {
                    continue;
                }
                ds.examples.push(Example {
                    dialogue: di,
                    turn: ti,
                    context: vocab.encode_all(&context),
                    response: vocab.encode_all(&turn.tokens),
                    gold: turn.tokens.clone(),
                    domain: d.domain,
                });
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Entity detection for scoring: canonical KB tokens and single-token
    /// forms of lexicon entities.
    pub fn is_entity(&self, token: &str) -> bool {
        self.entity_tokens.contains(token)
    }

    pub fn plan(&self, example: &Example) -> &KbPlan {
        &self.plans[example.dialogue]
    }

    /// Keeps only the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        self.examples.truncate(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, Turn};

    fn corpus_json() -> &'static str {
        r#"[{"scenario":{"uuid":"d1","task":{"intent":"schedule"},
              "kb":{"column_names":["event","time","date","party","agenda"],
                    "items":[{"event":"dinner","time":"8pm","date":"the 13th","party":"Ana","agenda":"-"}]}},
             "dialogue":[{"turn":"driver","data":{"utterance":"When is dinner?"}},
                         {"turn":"assistant","data":{"utterance":"Dinner is at 8pm on the 13th."}},
                         {"turn":"driver","data":{"utterance":"thanks"}},
                         {"turn":"assistant","data":{"utterance":""}}]}]"#
    }

    #[test]
    fn examples_follow_assistant_turns() {
        let (dialogues, errors) = parse_corpus(corpus_json()).unwrap();
        assert!(errors.is_empty());
        let lexicon = Lexicon::build(&dialogues, &[]);
        let (canon, store) = canonicalize_dialogue(&dialogues[0], &lexicon).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(canon.turns[1].tokens.join(" "), "dinner is at dinner_time on dinner_date .");
        let vocab = Vocabulary::build(std::slice::from_ref(&canon), &[store], 1);
        let ds = Dataset::new(&[canon], &vocab, &lexicon).unwrap();
        assert_eq!(ds.len(), 1);
        let ex = &ds.examples[0];
        assert_eq!(vocab.decode(&ex.context).join(" "), "when is dinner ?");
        assert_eq!(ex.gold.join(" "), "dinner is at dinner_time on dinner_date .");
        assert_eq!(ds.plan(ex).len(), 3);
        assert!(ds.is_entity("dinner_time"));
        assert!(ds.is_entity("dinner_party"));
        assert!(!ds.is_entity("dinner_agenda"));
        assert!(!ds.is_entity("is"));
    }

    #[test]
    fn skips_turns_without_context() {
        let d = Dialogue {
            id: "x".into(),
            domain: Domain::Weather,
            turns: vec![Turn::new(Speaker::Assistant, "hello")],
            kb: Default::default(),
        };
        let vocab = Vocabulary::from_parts(vec!["hello".into()], vec![]);
        assert!(Dataset::new(&[d], &vocab, &Lexicon::default()).unwrap().is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let (dialogues, _) = parse_corpus(corpus_json()).unwrap();
        let mut many = Vec::new();
        for i in 0..10 {
            let mut d = dialogues[0].clone();
            d.id = format!("d{i}");
            many.push(d);
        }
        let prepared = preprocess(LoadedCorpus { dialogues: many, ..Default::default() }, 3, 1);
        assert_eq!(prepared.train.len() + prepared.validation.len() + prepared.test.len(), 10);
        let dir = tempfile::tempdir().unwrap();
        prepared.save(dir.path()).unwrap();
        let loaded = PreparedCorpus::load(dir.path()).unwrap();
        assert_eq!(loaded.train, prepared.train);
        assert_eq!(loaded.vocab, prepared.vocab);
        assert_eq!(loaded.manifest, prepared.manifest);
        let again = tempfile::tempdir().unwrap();
        loaded.save(again.path()).unwrap();
        for f in FILES {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap(), "{f}");
        }
    }
}
