use super::dialogue::Dialogue;
use crate::kbstore::TripleStore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const SPECIAL_TOKENS: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Output space of the decoder: base tokens (ids `0..|V|`) followed by the
/// canonical KB tokens (ids `|V|..|V|+n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    base_len: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    base: Vec<String>,
    canonical: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_parts(f.base, f.canonical)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { canonical: v.tokens[v.base_len..].to_vec(), base: v.tokens[..v.base_len].to_vec() }
    }
}

impl Vocabulary {
    /// Assembles a vocabulary from explicit regions. Special tokens are
    /// forced to the front of the base region; duplicates are dropped.
    pub fn from_parts(base: Vec<String>, canonical: Vec<String>) -> Self {
        let mut tokens: Vec<String> = Vec::with_capacity(base.len() + canonical.len() + 4);
        let mut index = HashMap::new();
        let canonical_set: BTreeSet<&String> = canonical.iter().collect();
        let specials = SPECIAL_TOKENS.iter().map(|s| s.to_string());
        for t in specials.chain(base.iter().cloned()) {
            if !index.contains_key(&t) && !canonical_set.contains(&t) {
                index.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        }
        let base_len = tokens.len();
        for t in canonical {
            if !index.contains_key(&t) {
                index.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        }
        Self { tokens, base_len, index }
    }

    /// Base region: special tokens plus every training token seen at least
    /// `min_count` times. Canonical region: every canonical token of the
    /// training KBs (excluding missing-value triples), sorted.
    pub fn build(dialogues: &[Dialogue], stores: &[TripleStore], min_count: usize) -> Self {
        let mut canonical = BTreeSet::new();
        for store in stores {
            for t in store.triples().iter().filter(|t| !t.is_missing()) {
                canonical.insert(t.canonical_token.clone());
            }
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in dialogues {
            for turn in &d.turns {
                for tok in &turn.tokens {
                    *counts.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
        let base = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !canonical.contains(*t))
            .map(|(t, _)| t.to_string())
            .collect();
        Self::from_parts(base, canonical.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// |V|: size of the base region including special tokens.
    pub fn base_len(&self) -> usize {
        self.base_len
    }

    /// n: number of canonical KB tokens.
    pub fn canonical_len(&self) -> usize {
        self.tokens.len() - self.base_len
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or of the unknown token.
    pub fn encode(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk())
    }

    pub fn encode_all(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn is_canonical_id(&self, id: usize) -> bool {
        id >= self.base_len && id < self.tokens.len()
    }

    pub fn is_canonical(&self, token: &str) -> bool {
        self.id(token).is_some_and(|i| self.is_canonical_id(i))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn bos(&self) -> usize {
        1
    }
    pub fn eos(&self) -> usize {
        2
    }
    pub fn unk(&self) -> usize {
        3
    }
}
