use super::dialogue::{Dialogue, MISSING};
use super::tokenize::tokenize;
use crate::kbstore::{normalize_for_domain, KbTriple, TripleStore};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

/// Entity surface forms with their observed frequencies, and the reverse
/// index used to find entity mentions in token streams.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "LexiconFile", into = "LexiconFile")]
pub struct Lexicon {
    entities: BTreeMap<String, BTreeMap<String, u64>>,
    surfaces: HashMap<Vec<String>, String>,
    max_span: usize,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    entities: BTreeMap<String, BTreeMap<String, u64>>,
}

impl From<LexiconFile> for Lexicon {
    fn from(f: LexiconFile) -> Self {
        Lexicon::from_counts(f.entities)
    }
}

impl From<Lexicon> for LexiconFile {
    fn from(l: Lexicon) -> Self {
        LexiconFile { entities: l.entities }
    }
}

/// Normalized entity key: tokenized and space-joined.
pub(crate) fn entity_key(text: &str) -> String {
    tokenize(text).join(" ")
}

fn variants(entity: &str) -> Vec<String> {
    static TIME: OnceLock<Regex> = OnceLock::new();
    static ORDINAL: OnceLock<Regex> = OnceLock::new();
    let time = TIME.get_or_init(|| Regex::new(r"^(\d{1,2})(am|pm)$").unwrap());
    let ordinal = ORDINAL.get_or_init(|| Regex::new(r"^the (\d{1,2}(st|nd|rd|th))$").unwrap());
    let mut out = vec![entity.to_string()];
    if let Some(c) = time.captures(entity) {
        out.push(format!("{} {}", &c[1], &c[2]));
    }
    if let Some(c) = ordinal.captures(entity) {
        out.push(c[1].to_string());
    }
    out
}

impl Lexicon {
    /// Rebuilds the surface index from `entity -> surface -> count`.
    pub fn from_counts(entities: BTreeMap<String, BTreeMap<String, u64>>) -> Self {
        let mut surfaces: HashMap<Vec<String>, String> = HashMap::new();
        for (entity, forms) in &entities {
            for form in forms.keys().filter(|f| *f != entity) {
                let toks = tokenize(form);
                if !toks.is_empty() {
                    surfaces.entry(toks).or_insert_with(|| entity.clone());
                }
            }
        }
        // an entity's own name outranks another entity's variant
        for entity in entities.keys() {
            let toks = tokenize(entity);
            if !toks.is_empty() {
                surfaces.insert(toks, entity.clone());
            }
        }
        let max_span = surfaces.keys().map(Vec::len).max().unwrap_or(0);
        Self { entities, surfaces, max_span }
    }

    /// Collects entities from every KB cell, slot annotation and `extra`
    /// entry, expands simple variants, and counts surface occurrences in the
    /// utterances of `dialogues` (train and validation). Entities never seen
    /// in text keep their own name with count 1.
    pub fn build<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue> + Clone, extra: &[String]) -> Self {
        let mut names: BTreeMap<String, ()> = BTreeMap::new();
        let mut add = |raw: &str| {
            let key = entity_key(raw);
            if !key.is_empty() && key != MISSING {
                names.insert(key, ());
            }
        };
        for d in dialogues.clone() {
            if let Ok(store) = normalize_for_domain(&d.kb, d.domain) {
                for t in store.triples() {
                    add(&t.subject.join(" "));
                    add(&t.object);
                }
            }
            for turn in &d.turns {
                for v in turn.slots.values() {
                    add(v);
                }
            }
        }
        for e in extra {
            add(e);
        }

        let mut entities: BTreeMap<String, BTreeMap<String, u64>> = names
            .keys()
            .map(|e| (e.clone(), variants(e).into_iter().map(|v| (v, 0)).collect()))
            .collect();
        let scan = Lexicon::from_counts(entities.clone());
        for d in dialogues {
            for turn in &d.turns {
                let toks = &turn.tokens;
                let mut i = 0;
                while i < toks.len() {
                    match scan.longest_match(toks, i) {
                        Some((len, entity)) => {
                            let surface = toks[i..i + len].join(" ");
                            *entities.get_mut(entity).unwrap().entry(surface).or_insert(0) += 1;
                            i += len;
                        }
                        None => i += 1,
                    }
                }
            }
        }
        for (entity, forms) in entities.iter_mut() {
            forms.retain(|_, c| *c > 0);
            if forms.is_empty() {
                forms.insert(entity.clone(), 1);
            }
        }
        Self::from_counts(entities)
    }

    /// Longest entity surface starting at `start`: `(span length, entity)`.
    pub fn longest_match(&self, tokens: &[String], start: usize) -> Option<(usize, &str)> {
        let max = self.max_span.min(tokens.len().saturating_sub(start));
        (1..=max).rev().find_map(|len| self.surfaces.get(&tokens[start..start + len]).map(|e| (len, e.as_str())))
    }

    pub fn surfaces(&self, entity: &str) -> Option<&BTreeMap<String, u64>> {
        self.entities.get(entity)
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        self.entities.contains_key(entity)
    }

    /// Whether `token` is the single-token form of an entity produced by
    /// [`canonicalize`] when no KB triple holds that value.
    pub fn is_global_entity_token(&self, token: &str) -> bool {
        self.entities.contains_key(&token.replace('_', " "))
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, u64>)> {
        self.entities.iter()
    }
}

/// Replaces every entity mention by a canonical token, longest span first.
///
/// A mention whose entity is the object of a triple in `store` becomes that
/// triple's canonical token. When several triples hold the entity, the one
/// whose subject appears in the utterance wins, then the one with more of
/// its relation words present, then KB order. Other entities become their own name with
/// spaces replaced by `_`.
pub fn canonicalize(tokens: &[String], lexicon: &Lexicon, store: &TripleStore) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let Some((len, entity)) = lexicon.longest_match(tokens, i) else {
            out.push(tokens[i].clone());
            i += 1;
            continue;
        };
        let mentioned = |subject: &[String]| tokens.windows(subject.len()).any(|w| w == subject);
        let score = |t: &KbTriple| 2 * usize::from(mentioned(&t.subject)) + t.relation.iter().filter(|r| tokens.contains(r)).count();
        let mut chosen: Option<(&KbTriple, usize)> = None;
        for t in store.triples().iter().filter(|t| !t.is_missing() && t.object == entity) {
            let s = score(t);
            if chosen.is_none_or(|(_, best)| s > best) {
                chosen = Some((t, s));
            }
        }
        match chosen.map(|(t, _)| t) {
            Some(t) => out.push(t.canonical_token.clone()),
            None => out.push(entity.replace(' ', "_")),
        }
        i += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, RawKb, Speaker, Turn};
    use crate::kbstore::normalize_kb;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn lex(pairs: &[(&str, &[(&str, u64)])]) -> Lexicon {
        Lexicon::from_counts(
            pairs
                .iter()
                .map(|(e, fs)| (e.to_string(), fs.iter().map(|(f, c)| (f.to_string(), *c)).collect()))
                .collect(),
        )
    }

    fn poi_store() -> TripleStore {
        let kb = RawKb {
            columns: vec!["poi".into(), "address".into(), "poi_type".into()],
            rows: vec![vec!["Pizza My Heart".into(), "20 Main Street".into(), "pizza restaurant".into()]],
        };
        normalize_kb(&kb, "poi").unwrap()
    }

    #[test]
    fn address_mention_maps_to_poi_address_token() {
        let l = lex(&[("20 main street", &[("20 main street", 2)])]);
        let out = canonicalize(&toks("it is at 20 Main Street ."), &l, &poi_store());
        assert_eq!(out, toks("it is at pizza_my_heart_address ."));
    }

    #[test]
    fn relation_words_break_ties_between_triples() {
        let w = |x: &str| x.split(' ').map(String::from).collect::<Vec<_>>();
        let store = TripleStore::from_triples(vec![
            KbTriple::new(w("monday"), w("low"), "50f".into(), 0),
            KbTriple::new(w("tuesday"), w("high"), "50f".into(), 1),
        ]);
        let l = lex(&[("50f", &[("50f", 1)])]);
        assert_eq!(canonicalize(&toks("a high of 50f"), &l, &store), toks("a high of tuesday_high"));
        assert_eq!(canonicalize(&toks("on monday a high of 50f"), &l, &store).last().unwrap(), "monday_low");
        assert_eq!(canonicalize(&toks("it will be 50f"), &l, &store).last().unwrap(), "monday_low");
    }

    #[test]
    fn no_mentions_pass_through() {
        let l = lex(&[("20 main street", &[("20 main street", 1)])]);
        let t = toks("thank you very much");
        assert_eq!(canonicalize(&t, &l, &poi_store()), t);
    }

    #[test]
    fn longest_overlapping_span_wins() {
        let l = lex(&[
            ("the 13th", &[("the 13th", 3)]),
            ("the 13th of june", &[("the 13th of june", 1)]),
        ]);
        let store = TripleStore::default();
        let out = canonicalize(&toks("on the 13th of june please"), &l, &store);
        assert_eq!(out, toks("on the_13th_of_june please"));
        let out = canonicalize(&toks("on the 13th please"), &l, &store);
        assert_eq!(out, toks("on the_13th please"));
    }

    #[test]
    fn prefers_triple_whose_subject_is_mentioned() {
        let kb = RawKb {
            columns: vec!["event".into(), "time".into()],
            rows: vec![vec!["dinner".into(), "5pm".into()], vec!["meeting".into(), "5pm".into()]],
        };
        let store = normalize_kb(&kb, "event").unwrap();
        let l = lex(&[("5pm", &[("5pm", 1), ("5 pm", 1)])]);
        assert_eq!(canonicalize(&toks("the meeting is at 5 pm"), &l, &store), toks("the meeting is at meeting_time"));
        assert_eq!(canonicalize(&toks("it is at 5pm"), &l, &store), toks("it is at dinner_time"));
    }

    #[test]
    fn build_counts_variants_and_backfills_unseen() {
        let kb = RawKb {
            columns: vec!["event".into(), "time".into(), "agenda".into()],
            rows: vec![vec!["dinner".into(), "5pm".into(), "-".into()]],
        };
        let mut d = Dialogue { id: "a".into(), domain: Domain::Schedule, turns: vec![], kb };
        d.turns.push(Turn::new(Speaker::Driver, "when is dinner"));
        d.turns.push(Turn::new(Speaker::Assistant, "dinner is at 5 pm, or 5pm, or 5 pm."));
        let l = Lexicon::build([&d], &["room 100".to_string()]);
        assert_eq!(l.surfaces("5pm").unwrap().get("5 pm"), Some(&2));
        assert_eq!(l.surfaces("5pm").unwrap().get("5pm"), Some(&1));
        assert_eq!(l.surfaces("dinner").unwrap().get("dinner"), Some(&2));
        assert_eq!(l.surfaces("room 100").unwrap().get("room 100"), Some(&1));
        assert!(!l.contains_entity("-"));
        for (_, forms) in l.entities() {
            assert!(forms.values().any(|c| *c >= 1));
        }
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let l = lex(&[("5pm", &[("5pm", 3), ("5 pm", 1)])]);
        let back: Lexicon = serde_json::from_str(&serde_json::to_string(&l).unwrap()).unwrap();
        assert_eq!(back.longest_match(&toks("5 pm"), 0), Some((2, "5pm")));
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(words in proptest::collection::vec(0usize..8, 0..25)) {
            let alphabet = ["dinner", "at", "5", "pm", "5pm", "the", "13th", "ok"];
            let t: Vec<String> = words.iter().map(|&w| alphabet[w].to_string()).collect();
            let l = lex(&[
                ("5pm", &[("5pm", 1), ("5 pm", 1)]),
                ("the 13th", &[("the 13th", 1), ("13th", 1)]),
                ("dinner", &[("dinner", 1)]),
            ]);
            let kb = RawKb { columns: vec!["event".into(), "time".into()], rows: vec![vec!["dinner".into(), "5pm".into()]] };
            let store = normalize_kb(&kb, "event").unwrap();
            let once = canonicalize(&t, &l, &store);
            prop_assert_eq!(canonicalize(&once, &l, &store), once);
        }
    }
}
