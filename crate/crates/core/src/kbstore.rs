//! Knowledge bases as (subject, relation, object) triples.
//!
//! Every non-subject cell of a KB row becomes one triple whose canonical
//! token (`subject_relation`, e.g. `dinner_time`) is what the decoder emits
//! in place of the value. Weather forecast cells of the form
//! `"rain, low of 50F, high of 60F"` are split into three triples with
//! qualified relations (`monday weather`, `monday low`, `monday high`).

use crate::corpus::{tokenize, Domain, Lexicon, RawKb, Vocabulary, MISSING};
use crate::tensor::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use std::collections::BTreeMap;
use std::sync::OnceLock;

pub const MAX_TRIPLES: usize = 230;

#[derive(Debug, Clone, PartialEq)]
pub struct KbTriple {
    pub subject: Vec<String>,
    pub relation: Vec<String>,
    /// Normalized value; [`MISSING`] for absent cells.
    pub object: String,
    pub canonical_token: String,
    /// Source row in the raw KB.
    pub row: usize,
}

impl KbTriple {
    pub fn new(subject: Vec<String>, relation: Vec<String>, object: String, row: usize) -> Self {
        let canonical_token = subject.iter().chain(&relation).cloned().collect::<Vec<_>>().join("_");
        Self { subject, relation, object, canonical_token, row }
    }

    pub fn is_missing(&self) -> bool {
        self.object == MISSING
    }

    /// Tokens whose embeddings sum to this triple's key.
    pub fn key_tokens(&self) -> impl Iterator<Item = &String> {
        self.subject.iter().chain(&self.relation)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleStore {
    triples: Vec<KbTriple>,
    index: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KbError {
    #[error("subject column '{column}' not found among {available:?}")]
    MissingSubjectColumn { column: String, available: Vec<String> },
    #[error("row {row} has {got} cells but the KB has {expected} columns")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("KB normalizes to {0} triples, more than the limit of {MAX_TRIPLES}")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RealizeError {
    #[error("canonical token '{0}' does not resolve to a triple in this KB")]
    UnknownToken(String),
}

impl TripleStore {
    pub fn from_triples(triples: Vec<KbTriple>) -> Self {
        let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, t) in triples.iter().enumerate() {
            index.entry(t.canonical_token.clone()).or_default().push(i);
        }
        Self { triples, index }
    }

    pub fn triples(&self) -> &[KbTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Positions of all triples carrying `token`, in KB order.
    pub fn positions(&self, token: &str) -> &[usize] {
        self.index.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Picks the triple a decoded canonical token refers to. With colliding
    /// triples the highest score wins (ties and absent scores: first in KB order).
    pub fn resolve(&self, token: &str, scores: Option<&[f64]>) -> Option<&KbTriple> {
        let positions = self.positions(token);
        let mut best = *positions.first()?;
        if let Some(s) = scores {
            for &p in &positions[1..] {
                if s.get(p).copied().unwrap_or(f64::NEG_INFINITY) > s.get(best).copied().unwrap_or(f64::NEG_INFINITY) {
                    best = p;
                }
            }
        }
        Some(&self.triples[best])
    }
}

/// Subject column for each domain's KB layout.
pub fn subject_column(domain: Domain) -> &'static str {
    match domain {
        Domain::Schedule => "event",
        Domain::Weather => "location",
        Domain::Navigate => "poi",
    }
}

fn forecast_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+?)\s*,\s*low of\s+(\S+)\s*,\s*high of\s+(\S+)$").unwrap())
}

fn relation_tokens(column: &str) -> Vec<String> {
    tokenize(&column.replace('_', " "))
}

fn normalize_value(cell: &str) -> String {
    let v = tokenize(cell).join(" ");
    if v.is_empty() {
        MISSING.to_string()
    } else {
        v
    }
}

/// One triple per (row, non-subject column) pair in row-major order, with
/// missing-value cells retained.
pub fn normalize_kb(kb: &RawKb, subject_column: &str) -> Result<TripleStore, KbError> {
    if kb.rows.is_empty() {
        return Ok(TripleStore::default());
    }
    let subject_idx = kb.column_index(subject_column).ok_or_else(|| KbError::MissingSubjectColumn {
        column: subject_column.to_string(),
        available: kb.columns.clone(),
    })?;
    let mut triples = Vec::new();
    for (r, row) in kb.rows.iter().enumerate() {
        if row.len() != kb.columns.len() {
            return Err(KbError::RaggedRow { row: r, got: row.len(), expected: kb.columns.len() });
        }
        let subject = tokenize(&row[subject_idx]);
        for (c, column) in kb.columns.iter().enumerate() {
            if c == subject_idx {
                continue;
            }
            let relation = relation_tokens(column);
            let cell = row[c].trim().to_lowercase();
            if let Some(caps) = forecast_pattern().captures(&cell) {
                for (qualifier, value) in [("weather", &caps[1]), ("low", &caps[2]), ("high", &caps[3])] {
                    let mut rel = relation.clone();
                    rel.push(qualifier.to_string());
                    triples.push(KbTriple::new(subject.clone(), rel, normalize_value(value), r));
                }
            } else {
                triples.push(KbTriple::new(subject.clone(), relation, normalize_value(&cell), r));
            }
        }
    }
    if triples.len() > MAX_TRIPLES {
        return Err(KbError::TooLarge(triples.len()));
    }
    Ok(TripleStore::from_triples(triples))
}

pub fn normalize_for_domain(kb: &RawKb, domain: Domain) -> Result<TripleStore, KbError> {
    normalize_kb(kb, subject_column(domain))
}

/// Vocabulary ids of a triple's key tokens (unknown words map to UNK).
pub fn key_token_ids(triple: &KbTriple, vocab: &Vocabulary) -> Vec<usize> {
    triple.key_tokens().map(|t| vocab.encode(t)).collect()
}

/// Sum of the embedding rows of the subject and relation tokens.
pub fn key_embedding(triple: &KbTriple, embeddings: &Tensor, vocab: &Vocabulary) -> Vec<f64> {
    let d = embeddings.shape()[1];
    let mut out = vec![0.0; d];
    for id in key_token_ids(triple, vocab) {
        for (o, x) in out.iter_mut().zip(embeddings.row(id)) {
            *o += x;
        }
    }
    out
}

/// Draws a surface form for `entity` proportionally to its lexicon counts;
/// entities unknown to the lexicon are returned verbatim.
pub fn sample_surface(entity: &str, lexicon: &Lexicon, rng: &mut impl Rng) -> String {
    let Some(forms) = lexicon.surfaces(entity).filter(|f| !f.is_empty()) else {
        return entity.to_string();
    };
    let (names, weights): (Vec<&String>, Vec<u64>) = forms.iter().unzip();
    match WeightedIndex::new(&weights) {
        Ok(dist) => names[dist.sample(rng)].clone(),
        Err(_) => entity.to_string(),
    }
}

/// Looks up a canonical token's value in `store` and renders it as a surface
/// form sampled from the inverse lexicon.
pub fn realize(token: &str, store: &TripleStore, lexicon: &Lexicon, rng: &mut impl Rng) -> Result<String, RealizeError> {
    let triple = store.resolve(token, None).ok_or_else(|| RealizeError::UnknownToken(token.to_string()))?;
    Ok(sample_surface(&triple.object, lexicon, rng))
}

pub fn realize_seeded(token: &str, store: &TripleStore, lexicon: &Lexicon, seed: u64) -> Result<String, RealizeError> {
    realize(token, store, lexicon, &mut ChaCha8Rng::seed_from_u64(seed))
}
