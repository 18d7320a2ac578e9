//! BLEU and micro-averaged entity F1 over canonicalized responses.

use crate::corpus::Domain;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

pub const BLEU_ORDER: usize = 4;
pub const BLEU_EPSILON: f64 = 1e-9;

/// A gold response and the system's prediction, both as canonical tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub domain: Domain,
}

impl EvalPair {
    pub fn new(gold: Vec<String>, predicted: Vec<String>, domain: Domain) -> Self {
        Self { gold, predicted, domain }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the number of candidate n-grams.
fn modified_precision(reference: &[String], candidate: &[String], n: usize) -> (usize, usize) {
    let reference = ngram_counts(reference, n);
    let candidate = ngram_counts(candidate, n);
    let matched = candidate.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.values().sum())
}

fn brevity_penalty(reference_len: usize, candidate_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// BLEU-4 of one response on a 0–1 scale.
///
/// Orders beyond the candidate length are left out of the geometric mean;
/// a zero match count at an included order counts as `epsilon` matches.
/// An empty prediction or one with no unigram overlap scores 0.
pub fn sentence_bleu(reference: &[String], candidate: &[String], epsilon: f64) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let order = BLEU_ORDER.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let (matched, total) = modified_precision(reference, candidate, n);
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let matched = if matched == 0 { epsilon } else { matched as f64 };
        log_sum += (matched / total as f64).ln();
    }
    brevity_penalty(reference.len(), candidate.len()) * (log_sum / order as f64).exp()
}

/// Average sentence BLEU over all pairs, scaled to 0–100.
pub fn bleu(pairs: &[EvalPair]) -> f64 {
    bleu_with(pairs, BLEU_EPSILON)
}

pub fn bleu_with(pairs: &[EvalPair], epsilon: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    100.0 * pairs.iter().map(|p| sentence_bleu(&p.gold, &p.predicted, epsilon)).sum::<f64>() / pairs.len() as f64
}

/// Corpus-level BLEU-4 (pooled n-gram counts and lengths), scaled to 0–100.
pub fn corpus_bleu(pairs: &[EvalPair]) -> f64 {
    let (mut ref_len, mut cand_len) = (0, 0);
    let mut matched = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    for p in pairs {
        ref_len += p.gold.len();
        cand_len += p.predicted.len();
        for n in 1..=BLEU_ORDER {
            let (m, t) = modified_precision(&p.gold, &p.predicted, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if matched[0] == 0 {
        return 0.0;
    }
    let log_sum: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let m = if matched[i] == 0 { BLEU_EPSILON } else { matched[i] as f64 };
            (m / total[i].max(1) as f64).ln()
        })
        .sum();
    100.0 * brevity_penalty(ref_len, cand_len) * (log_sum / BLEU_ORDER as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// No pair in scope had any gold entity; `f1` is then 0.
    pub no_gold_entities: bool,
}

/// Deduplicated entity tokens of one response.
pub fn entity_set<'a>(tokens: &'a [String], is_entity: &impl Fn(&str) -> bool) -> BTreeSet<&'a str> {
    tokens.iter().map(String::as_str).filter(|t| is_entity(t)).collect()
}

/// Micro-averaged entity precision, recall and F1: true/false positive and
/// false negative counts are summed over responses before dividing.
pub fn entity_f1(pairs: &[EvalPair], is_entity: impl Fn(&str) -> bool, domain: Option<Domain>) -> EntityScore {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for p in pairs.iter().filter(|p| domain.is_none_or(|d| d == p.domain)) {
        let gold = entity_set(&p.gold, &is_entity);
        let pred = entity_set(&p.predicted, &is_entity);
        let hit = gold.intersection(&pred).count();
        tp += hit;
        fp += pred.len() - hit;
        fn_ += gold.len() - hit;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    EntityScore {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        no_gold_entities: tp + fn_ == 0,
    }
}

/// BLEU plus aggregate and per-domain entity F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu: f64,
    pub entity_f1: f64,
    pub scheduling_f1: f64,
    pub weather_f1: f64,
    pub navigation_f1: f64,
}

impl Scores {
    pub fn compute(pairs: &[EvalPair], is_entity: impl Fn(&str) -> bool) -> Self {
        let f1 = |d| entity_f1(pairs, &is_entity, d).f1;
        Self {
            bleu: bleu(pairs),
            entity_f1: f1(None),
            scheduling_f1: f1(Some(Domain::Schedule)),
            weather_f1: f1(Some(Domain::Weather)),
            navigation_f1: f1(Some(Domain::Navigate)),
        }
    }

    pub fn domain_f1(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Schedule => self.scheduling_f1,
            Domain::Weather => self.weather_f1,
            Domain::Navigate => self.navigation_f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pair(g: &str, p: &str) -> EvalPair {
        EvalPair::new(t(g), t(p), Domain::Schedule)
    }

    fn upper(s: &str) -> bool {
        s.chars().all(|c| c.is_ascii_uppercase())
    }

    #[test]
    fn identical_responses_score_100() {
        assert!((bleu(&[pair("a b c d e", "a b c d e"), pair("x y", "x y")]) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_and_empty_score_zero() {
        assert_eq!(bleu(&[pair("a b c", "x y z")]), 0.0);
        assert_eq!(bleu(&[pair("a b c", "")]), 0.0);
    }

    #[test]
    fn one_substitution_at_the_end() {
        let want = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&[pair("a b c d e", "a b c d f")]) - want).abs() < 1e-9);
    }

    #[test]
    fn short_candidates_get_brevity_penalty() {
        let want = 100.0 * (1.0f64 - 5.0 / 3.0).exp();
        assert!((bleu(&[pair("a b c d e", "a b c")]) - want).abs() < 1e-9);
    }

    #[test]
    fn corpus_bleu_of_identical_is_100() {
        assert!((corpus_bleu(&[pair("a b c d e", "a b c d e")]) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn single_response_f1() {
        let s = entity_f1(&[pair("A B x", "A C y")], upper, None);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn micro_average_differs_from_macro() {
        let pairs = [pair("A", "A B"), pair("C", "z")];
        let s = entity_f1(&pairs, upper, None);
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (1, 1, 1));
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn no_gold_entities_is_flagged() {
        let s = entity_f1(&[pair("x y", "A")], upper, None);
        assert!(s.no_gold_entities);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn domain_filter_selects_pairs() {
        let mut w = pair("A", "B");
        w.domain = Domain::Weather;
        let pairs = [pair("A", "A"), w];
        assert_eq!(entity_f1(&pairs, upper, Some(Domain::Schedule)).f1, 1.0);
        assert_eq!(entity_f1(&pairs, upper, Some(Domain::Weather)).f1, 0.0);
        let s = Scores::compute(&pairs, upper);
        assert_eq!(s.entity_f1, 0.5);
        assert_eq!(s.navigation_f1, 0.0);
    }

    proptest! {
        #[test]
        fn bleu_of_self_is_100(words in prop::collection::vec("[a-e]", 1..12)) {
            let p = EvalPair::new(words.clone(), words, Domain::Weather);
            prop_assert!((bleu(&[p]) - 100.0).abs() < 1e-9);
        }

        #[test]
        fn bleu_ignores_renaming(g in prop::collection::vec("[a-d]", 1..10), c in prop::collection::vec("[a-d]", 1..10)) {
            let rename = |v: &[String]| v.iter().map(|w| format!("{w}{w}")).collect::<Vec<_>>();
            let a = bleu(&[EvalPair::new(g.clone(), c.clone(), Domain::Weather)]);
            let b = bleu(&[EvalPair::new(rename(&g), rename(&c), Domain::Weather)]);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn f1_ignores_order_and_duplicates(g in prop::collection::vec("[A-D]|[a-b]", 0..8), c in prop::collection::vec("[A-D]|[a-b]", 0..8)) {
            let a = entity_f1(&[EvalPair::new(g.clone(), c.clone(), Domain::Navigate)], upper, None);
            let mut c2: Vec<String> = c.iter().rev().cloned().collect();
            c2.extend(c.iter().cloned());
            let b = entity_f1(&[EvalPair::new(g, c2, Domain::Navigate)], upper, None);
            prop_assert_eq!(a, b);
        }
    }
}
