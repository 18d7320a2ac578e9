//! Optimization: Adam with L2 penalty, dropout, global-norm clipping,
//! validation-driven model selection and random hyperparameter search.

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{Domain, Lexicon, Vocabulary};
use crate::data::{Dataset, Example};
use crate::metrics::{EvalPair, Scores};
use crate::network::{decode_greedy, sequence_loss, Ablation, Dropout, ModelConfig, ModelError, ModelParams, ParamVars};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout_keep: f64,
    pub l2: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub max_decode_len: usize,
    /// Threads computing per-example gradients of a batch.
    pub workers: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            epochs: 30,
            learning_rate: 5e-4,
            dropout_keep: 0.85,
            l2: 5e-6,
            clip_norm: 10.0,
            batch_size: 1,
            seed: 0,
            patience: 5,
            max_decode_len: 40,
            workers: 1,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        let mut m = ModelConfig::new(self.dim, vocab).with_ablation(self.ablation);
        m.dropout_keep = self.dropout_keep;
        m
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {reason}; config: {config}")]
    Diverged { epoch: usize, step: usize, reason: String, config: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no training examples")]
    NoExamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert!(p.same_shape(g), "gradient shape {:?} for parameter {:?}", g.shape(), p.shape());
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + state.epsilon);
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `clip`; returns the norm
/// before clipping, or `None` if any gradient is not finite.
pub fn clip_gradients(grads: &mut [Tensor], clip: f64) -> Option<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return None;
    }
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    Some(norm)
}

/// Loss and parameter gradients of one example.
pub struct ExampleGradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

pub fn example_gradients(
    params: &ModelParams,
    model: &ModelConfig,
    vocab: &Vocabulary,
    example: &Example,
    dataset: &Dataset,
    l2: f64,
    dropout: &mut Dropout,
) -> Result<ExampleGradients, ModelError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let out = sequence_loss(&mut tape, &pv, model, vocab.eos(), vocab.bos(), &example.context, &example.response, dataset.plan(example), l2, dropout)?;
    let loss = tape.value(out.loss).item();
    let mut g = tape.backward(out.loss)?;
    let grads = pv
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(ExampleGradients { loss, grads })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a);
    rng.set_word_pos(u128::from(b) * 16);
    rng.random()
}

/// Validation results of a model on a dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean teacher-forced cross-entropy per token (no L2 term).
    pub loss: f64,
    /// Fraction of teacher-forced steps whose argmax is the gold token.
    pub token_accuracy: f64,
    pub scores: Scores,
    pub pairs: Vec<EvalPair>,
}

/// Teacher-forced loss and greedy-decoding scores over every example.
pub fn evaluate(params: &ModelParams, model: &ModelConfig, vocab: &Vocabulary, dataset: &Dataset, max_len: usize) -> Result<Evaluation, ModelError> {
    let per: Vec<(f64, usize, usize, EvalPair)> = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let plan = dataset.plan(ex);
            let mut tape = Tape::new();
            let pv: ParamVars = params.register(&mut tape);
            let l = sequence_loss(&mut tape, &pv, model, vocab.eos(), vocab.bos(), &ex.context, &ex.response, plan, 0.0, &mut Dropout::disabled())?;
            let out = decode_greedy(params, model, &ex.context, plan, vocab.bos(), vocab.eos(), max_len)?;
            let predicted = vocab.decode(&out.tokens);
            Ok((l.cross_entropy * l.tokens as f64, l.tokens, l.correct, EvalPair::new(ex.gold.clone(), predicted, ex.domain)))
        })
        .collect::<Result<_, ModelError>>()?;
    let tokens: usize = per.iter().map(|p| p.1).sum();
    let loss = per.iter().map(|p| p.0).sum::<f64>() / tokens.max(1) as f64;
    let token_accuracy = per.iter().map(|p| p.2).sum::<usize>() as f64 / tokens.max(1) as f64;
    let pairs: Vec<EvalPair> = per.into_iter().map(|p| p.3).collect();
    let scores = Scores::compute(&pairs, |t| dataset.is_entity(t));
    Ok(Evaluation { loss, token_accuracy, scores, pairs })
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bleu: f64,
    pub val_entity_f1: f64,
    pub per_domain_f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation entity F1.
    pub params: ModelParams,
    pub model: ModelConfig,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran (the initialization is returned).
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub best_val_loss: f64,
}

/// Where training writes its outputs.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.jsonl")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn validate_config(c: &TrainConfig) -> Result<(), TrainError> {
    let bad = |m: &str| Err(TrainError::Config(m.to_string()));
    if c.dim == 0 {
        return bad("dim must be positive");
    }
    if c.batch_size == 0 {
        return bad("batch_size must be positive");
    }
    if !(c.dropout_keep > 0.0 && c.dropout_keep <= 1.0) {
        return bad("dropout_keep must be in (0, 1]");
    }
    if c.learning_rate.is_nan() || c.learning_rate <= 0.0 || !c.learning_rate.is_finite() {
        return bad("learning_rate must be positive");
    }
    if c.l2 < 0.0 || c.clip_norm <= 0.0 {
        return bad("l2 must be non-negative and clip_norm positive");
    }
    Ok(())
}

/// Trains on `train`, validating after every epoch on `val`.
///
/// The epoch with the highest validation entity F1 is kept (ties go to the
/// lower validation loss). With a run directory, the metrics log and the
/// best checkpoint are written there as training proceeds.
pub fn train(
    train: &Dataset,
    val: &Dataset,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    config: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome, TrainError> {
    validate_config(config)?;
    if train.is_empty() && config.epochs > 0 {
        return Err(TrainError::NoExamples);
    }
    let model = config.model_config(vocab);
    let mut params = ModelParams::init(config.dim, vocab.len(), config.seed);
    let mut adam = AdamState::new(params.tensors());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let save = |p: &ModelParams| -> Result<(), TrainError> {
        if let Some(run) = run {
            let ckpt = Checkpoint { model: model.clone(), train: Some(config.clone()), vocab: vocab.clone(), lexicon: lexicon.clone(), params: p.clone() };
            ckpt.save(&run.checkpoint())?;
        }
        Ok(())
    };
    let mut log = match run {
        Some(run) => {
            std::fs::create_dir_all(&run.0).map_err(io_err(&run.0))?;
            let path = run.metrics();
            Some((std::fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };

    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let diverged = |epoch, step, reason: String| TrainError::Diverged {
        epoch,
        step,
        reason,
        config: serde_json::to_string(config).unwrap_or_default(),
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, 1, epoch as u64)));
        let mut total_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<ExampleGradients, ModelError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut dropout = Dropout::new(model.dropout_keep, mix(config.seed, 2 + epoch as u64, i as u64));
                        example_gradients(&params, &model, vocab, &train.examples[i], train, config.l2, &mut dropout)
                    })
                    .collect()
            });
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(diverged(epoch, step, format!("loss is {}", r.loss)));
                }
                total_loss += r.loss;
                match grads.as_mut() {
                    None => grads = Some(r.grads),
                    Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            if batch.len() > 1 {
                grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / batch.len() as f64));
            }
            if clip_gradients(&mut grads, config.clip_norm).is_none() {
                return Err(diverged(epoch, step, "non-finite gradient".into()));
            }
            adam_step(params.tensors_mut(), &grads, &mut adam, config.learning_rate);
        }

        let eval = evaluate(&params, &model, vocab, val, config.max_decode_len)?;
        let record = EpochRecord {
            epoch,
            train_loss: total_loss / train.len() as f64,
            val_loss: eval.loss,
            val_bleu: eval.scores.bleu,
            val_entity_f1: eval.scores.entity_f1,
            per_domain_f1: Domain::ALL.iter().map(|&d| (d.to_string(), eval.scores.domain_f1(d))).collect(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val BLEU {:.2}, val entity F1 {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_bleu,
            record.val_entity_f1
        );
        if let Some((file, path)) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        history.push(record);

        let better = eval.scores.entity_f1 > best.2 || (eval.scores.entity_f1 == best.2 && eval.loss < best.3);
        if better {
            best = (params.clone(), epoch, eval.scores.entity_f1, eval.loss);
            save(&best.0)?;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                log::info!("stopping early after epoch {epoch}");
                break;
            }
        }
    }
    if best.1 == 0 {
        save(&best.0)?;
        if best.2 == f64::NEG_INFINITY {
            best.2 = 0.0;
        }
    }
    Ok(TrainOutcome { params: best.0, model, history, best_epoch: best.1, best_val_f1: best.2, best_val_loss: best.3 })
}

/// Uniform sampling ranges for random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub dropout_keep: (f64, f64),
    pub l2: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { learning_rate: (1e-4, 1e-3), dropout_keep: (0.8, 0.9), l2: (3e-6, 1e-5) }
    }
}

impl SearchSpace {
    pub fn sample(&self, base: &TrainConfig, rng: &mut impl Rng) -> TrainConfig {
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        TrainConfig {
            learning_rate: draw(self.learning_rate),
            dropout_keep: draw(self.dropout_keep),
            l2: draw(self.l2),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    pub val_entity_f1: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Trains `trials` configurations sampled from `space` around `base` and
/// returns the one with the highest validation entity F1 (ties: lower
/// validation loss, then the earlier trial).
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    train_set: &Dataset,
    val: &Dataset,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    base: &TrainConfig,
    space: &SearchSpace,
    trials: usize,
    seed: u64,
) -> Result<SearchOutcome, TrainError> {
    if trials == 0 {
        return Err(TrainError::Config("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SearchOutcome { best: 0, trials: Vec::with_capacity(trials) };
    for i in 0..trials {
        let config = space.sample(base, &mut rng);
        log::info!("trial {}: lr {:.2e}, keep {:.3}, l2 {:.2e}", i + 1, config.learning_rate, config.dropout_keep, config.l2);
        let r = train(train_set, val, vocab, lexicon, &config, None)?;
        let trial = Trial { config, val_entity_f1: r.best_val_f1, val_loss: r.best_val_loss };
        if i > 0 {
            let b = &out.trials[out.best];
            if trial.val_entity_f1 > b.val_entity_f1 || (trial.val_entity_f1 == b.val_entity_f1 && trial.val_loss < b.val_loss) {
                out.best = i;
            }
        }
        out.trials.push(trial);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use crate::data::preprocess;
    use crate::corpus::LoadedCorpus;
    use crate::network::ParamId;

    struct Fixture {
        train: Dataset,
        val: Dataset,
        vocab: Vocabulary,
        lexicon: Lexicon,
    }

    fn fixture(n: usize) -> Fixture {
        let (dialogues, _) = parse_corpus(&crate::synth::to_json(&crate::synth::generate(n, 7))).unwrap();
        let p = preprocess(LoadedCorpus { dialogues, ..Default::default() }, 1, 1);
        Fixture {
            train: Dataset::new(&p.train, &p.vocab, &p.lexicon).unwrap(),
            val: Dataset::new(&p.validation, &p.vocab, &p.lexicon).unwrap(),
            vocab: p.vocab,
            lexicon: p.lexicon,
        }
    }

    fn small() -> TrainConfig {
        TrainConfig { dim: 6, epochs: 2, max_decode_len: 8, patience: 0, learning_rate: 1e-3, ..Default::default() }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 10.0), Some(5.0));
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::vector(vec![12.0]), Tensor::vector(vec![16.0])];
        assert_eq!(clip_gradients(&mut g, 10.0), Some(20.0));
        assert!((global_norm(&g) - 10.0).abs() < 1e-9);
        let mut g = vec![Tensor::vector(vec![1e6, 0.0, 0.0])];
        clip_gradients(&mut g, 10.0);
        assert_eq!(global_norm(&g), 10.0);
        let mut g = vec![Tensor::vector(vec![f64::NAN])];
        assert_eq!(clip_gradients(&mut g, 10.0), None);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1);
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let g = [0.5, -3.0, 1e-9];
        let mut p = vec![Tensor::vector(vec![0.0; 3])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::vector(g.to_vec())], &mut s, 0.01);
        for (x, gi) in p[0].data().iter().zip(g) {
            // m̂ = g and v̂ = g² after one step
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut s = AdamState::new(&p);
        let mut last = 1.0;
        for _ in 0..100 {
            let x = p[0].data()[0];
            adam_step(&mut p, &[Tensor::vector(vec![2.0 * x])], &mut s, 0.01);
            let loss = p[0].data()[0].powi(2);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let p = ModelParams::init(50, 120, 9);
        let w = p.get(ParamId::OutputProjection).data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 1.0 / 100.0;
        assert!((var - want).abs() / want < 0.05, "{var}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let f = fixture(12);
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir(dir.path().to_path_buf());
        let c = TrainConfig { epochs: 0, ..small() };
        let out = train(&f.train, &f.val, &f.vocab, &f.lexicon, &c, Some(&run)).unwrap();
        assert_eq!(out.params, ModelParams::init(c.dim, f.vocab.len(), c.seed));
        assert!(out.history.is_empty());
        assert_eq!(Checkpoint::load(&run.checkpoint()).unwrap().params, out.params);
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let f = fixture(12);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let logs: Vec<String> = dirs
            .iter()
            .map(|d| {
                let run = RunDir(d.path().to_path_buf());
                train(&f.train, &f.val, &f.vocab, &f.lexicon, &small(), Some(&run)).unwrap();
                std::fs::read_to_string(run.metrics()).unwrap()
            })
            .collect();
        assert_eq!(logs[0], logs[1]);
        assert_eq!(logs[0].lines().count(), 2);
        let rec: EpochRecord = serde_json::from_str(logs[0].lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 1);
        assert_eq!(rec.per_domain_f1.len(), 3);
    }

    #[test]
    fn parallel_batches_match_serial() {
        let f = fixture(12);
        let serial = TrainConfig { batch_size: 4, ..small() };
        let parallel = TrainConfig { workers: 3, ..serial.clone() };
        let a = train(&f.train, &f.val, &f.vocab, &f.lexicon, &serial, None).unwrap();
        let b = train(&f.train, &f.val, &f.vocab, &f.lexicon, &parallel, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_reports_config() {
        let f = fixture(6);
        let c = TrainConfig { learning_rate: f64::MAX, epochs: 3, ..small() };
        match train(&f.train, &f.val, &f.vocab, &f.lexicon, &c, None) {
            Err(TrainError::Diverged { config, .. }) => assert!(config.contains("learning_rate")),
            Err(TrainError::Config(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
        }
    }

    #[test]
    fn bad_config_is_rejected() {
        let f = fixture(6);
        let c = TrainConfig { batch_size: 0, ..small() };
        assert!(matches!(train(&f.train, &f.val, &f.vocab, &f.lexicon, &c, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn search_returns_the_best_logged_trial() {
        let f = fixture(12);
        let base = TrainConfig { epochs: 1, ..small() };
        let one = random_search(&f.train, &f.val, &f.vocab, &f.lexicon, &base, &SearchSpace::default(), 1, 3).unwrap();
        assert_eq!(one.best, 0);
        let three = random_search(&f.train, &f.val, &f.vocab, &f.lexicon, &base, &SearchSpace::default(), 3, 3).unwrap();
        let max = three.trials.iter().map(|t| t.val_entity_f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(three.best_trial().val_entity_f1, max);
        for t in &three.trials {
            assert!((1e-4..=1e-3).contains(&t.config.learning_rate));
            assert!((0.8..=0.9).contains(&t.config.dropout_keep));
            assert!((3e-6..=1e-5).contains(&t.config.l2));
        }
        let fixed = SearchSpace { learning_rate: (5e-4, 5e-4), dropout_keep: (0.85, 0.85), l2: (5e-6, 5e-6) };
        let same = random_search(&f.train, &f.val, &f.vocab, &f.lexicon, &base, &fixed, 3, 3).unwrap();
        assert_eq!(same.best, 0);
        assert!(same.trials.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn empty_kb_losses_ignore_kb_attention() {
        let f = fixture(12);
        let mut train_set = f.train.clone();
        for p in &mut train_set.plans {
            *p = Default::default();
        }
        let full = small();
        let seq = TrainConfig { ablation: Ablation::EncoderOnly, ..small() };
        let a = train(&train_set, &train_set, &f.vocab, &f.lexicon, &full, None).unwrap();
        let b = train(&train_set, &train_set, &f.vocab, &f.lexicon, &seq, None).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn l2_adds_twice_lambda_w_to_gradients() {
        let f = fixture(6);
        let c = small();
        let model = c.model_config(&f.vocab);
        let params = ModelParams::init(c.dim, f.vocab.len(), 1);
        let ex = &f.train.examples[0];
        let a = example_gradients(&params, &model, &f.vocab, ex, &f.train, 0.0, &mut Dropout::disabled()).unwrap();
        let b = example_gradients(&params, &model, &f.vocab, ex, &f.train, 0.01, &mut Dropout::disabled()).unwrap();
        assert!((b.loss - a.loss - 0.01 * params.penalized_sum_squares()).abs() < 1e-12);
        for (id, (ga, gb)) in ParamId::ALL.iter().zip(a.grads.iter().zip(&b.grads)) {
            let w = params.get(*id).data();
            for (i, wi) in w.iter().enumerate() {
                let extra = if id.is_penalized() { 0.02 * wi } else { 0.0 };
                assert!((gb.data()[i] - ga.data()[i] - extra).abs() < 1e-12, "{id:?}");
            }
        }
    }

    #[test]
    fn config_reads_flat_toml() {
        let c: TrainConfig = toml::from_str("learning_rate = 0.0002\nablation = \"kb-only\"\nepochs = 3\n").unwrap();
        assert_eq!(c.learning_rate, 2e-4);
        assert_eq!(c.ablation, Ablation::KbOnly);
        assert_eq!(c.dim, 200);
        assert!(toml::from_str::<TrainConfig>("learnig_rate = 1").is_err());
    }
}
