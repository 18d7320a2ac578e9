//! The key-value retrieval network.
//!
//! An LSTM encoder reads the dialogue context. At every decoding step the
//! decoder LSTM's hidden state queries two attentions, each scored by a
//! two-layer tanh MLP:
//!
//! * over encoder states, producing a context vector that joins the hidden
//!   state in the output projection `o = U [h; context]`;
//! * over KB keys (sum of subject and relation embeddings), whose raw scores
//!   are added to `o` at the vocabulary slots of the triples' canonical tokens.
//!
//! Either attention can be switched off in [`ModelConfig`] to obtain the
//! encoder-attention-only seq2seq model or the KB-only ablation.

mod params;

pub use params::{ModelParams, ParamId, ParamShapeError, ParamVars};

use crate::autograd::{AutogradError, Tape, Var};
use crate::corpus::Vocabulary;
use crate::kbstore::{key_token_ids, TripleStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_encoder_attention: bool,
    pub use_kb_attention: bool,
    /// Embedding, hidden and cell size.
    pub dim: usize,
    pub dropout_keep: f64,
    /// |V|, including special tokens.
    pub base_vocab: usize,
    /// n, the number of canonical KB tokens.
    pub canonical_vocab: usize,
}

impl ModelConfig {
    pub fn new(dim: usize, vocab: &Vocabulary) -> Self {
        Self {
            use_encoder_attention: true,
            use_kb_attention: true,
            dim,
            dropout_keep: 1.0,
            base_vocab: vocab.base_len(),
            canonical_vocab: vocab.canonical_len(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.canonical_vocab
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_encoder_attention, self.use_kb_attention) = match ablation {
            Ablation::Full => (true, true),
            Ablation::EncoderOnly => (true, false),
            Ablation::KbOnly => (false, true),
        };
        self
    }
}

/// Which attention paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Seq2seq with encoder attention and no KB attention.
    EncoderOnly,
    /// KB attention with the encoder context vector zeroed.
    KbOnly,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "enc-only" | "encoder-only" => Ok(Ablation::EncoderOnly),
            "kb-only" => Ok(Ablation::KbOnly),
            other => Err(format!("unknown ablation '{other}' (expected full, enc-only or kb-only)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("context is empty")]
    EmptyContext,
    #[error("token id {id} is outside the output space of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("model dimension {params} does not match config dimension {config}")]
    DimMismatch { params: usize, config: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Inverted dropout with masks drawn from a seeded generator.
#[derive(Debug)]
pub struct Dropout {
    keep: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { keep: 1.0, rng: None }
    }

    pub fn new(keep: f64, seed: u64) -> Self {
        if keep >= 1.0 {
            Self::disabled()
        } else {
            Self { keep, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = self.keep;
        let shape = tape.value(x).shape().to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        Ok(tape.dropout(x, Tensor::new(shape, mask).expect("mask shape"))?)
    }
}

/// Per-KB lookup data: which triples take part in retrieval, their key
/// token ids, and the vocabulary slot each one writes to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KbPlan {
    pub key_bags: Vec<Vec<usize>>,
    pub slots: Vec<usize>,
    /// Store position of each participating triple.
    pub positions: Vec<usize>,
    pub store_len: usize,
}

impl KbPlan {
    /// Missing-value triples and triples whose canonical token is not in the
    /// vocabulary do not take part.
    pub fn new(store: &TripleStore, vocab: &Vocabulary) -> Self {
        let mut plan = KbPlan { store_len: store.len(), ..Default::default() };
        for (i, t) in store.triples().iter().enumerate() {
            if t.is_missing() {
                continue;
            }
            let Some(slot) = vocab.id(&t.canonical_token).filter(|&id| vocab.is_canonical_id(id)) else {
                continue;
            };
            plan.key_bags.push(key_token_ids(t, vocab));
            plan.slots.push(slot);
            plan.positions.push(i);
        }
        plan
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    /// Spreads per-plan scores over store positions (`-inf` for non-participants).
    pub fn scores_by_position(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.store_len];
        for (&p, &s) in self.positions.iter().zip(scores) {
            out[p] = s;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Encoder hidden states as rows, `[m, d]` (after output dropout).
    pub states: Var,
    pub final_hidden: Var,
    pub final_cell: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
}

/// Inputs of a two-layer tanh scoring MLP whose memory-side first layer is
/// already applied to every memory row.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    pub projected: Var,
    pub query_weight_t: Var,
    pub w2_t: Var,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct KbMemory {
    pub scorer: AttentionMemory,
    pub slots: Vec<usize>,
}

/// Per-example values shared by every decoding step.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub encoder: EncoderOutput,
    pub enc_attention: Option<AttentionMemory>,
    pub kb: Option<KbMemory>,
    dec_input_t: Var,
    dec_hidden_t: Var,
    dec_bias: Var,
    output: Var,
    zero_context: Var,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// o_t over |V|+n.
    pub logits: Var,
    /// Encoder attention weights a^t (absent when that path is off).
    pub attention: Option<Var>,
    /// Raw KB scores u^t, one per participating triple.
    pub kb_scores: Option<Var>,
    pub context: Var,
    pub state: DecoderState,
}

struct LstmGates {
    input_t: Var,
    hidden_t: Var,
}

fn split_gates(tape: &mut Tape<'_>, weight: Var, d: usize) -> Result<LstmGates> {
    let wt = tape.transpose(weight)?;
    Ok(LstmGates { input_t: tape.slice_rows(wt, 0, d)?, hidden_t: tape.slice_rows(wt, d, d)? })
}

/// One LSTM cell update from precomputed input gates `x W_x^T + b`.
fn lstm_cell(tape: &mut Tape<'_>, input_gates: Var, hidden_t: Var, state: DecoderState, d: usize) -> Result<DecoderState> {
    let rec = tape.matmul(state.hidden, hidden_t)?;
    let gates = tape.add(input_gates, rec)?;
    let i = tape.slice(gates, 0, d)?;
    let f = tape.slice(gates, d, d)?;
    let g = tape.slice(gates, 2 * d, d)?;
    let o = tape.slice(gates, 3 * d, d)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(o, squashed)?;
    Ok(DecoderState { hidden, cell })
}

fn check_ids(ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, size }),
        None => Ok(()),
    }
}

/// Runs the encoder LSTM over the context tokens.
pub fn encode(tape: &mut Tape<'_>, pv: &ParamVars, config: &ModelConfig, context: &[usize], dropout: &mut Dropout) -> Result<EncoderOutput> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    check_ids(context, config.vocab_size())?;
    let d = config.dim;
    let x = tape.embedding(pv.get(ParamId::Embedding), context.iter().map(|&t| vec![t]).collect())?;
    let x = dropout.apply(tape, x)?;
    let gates = split_gates(tape, pv.get(ParamId::EncoderWeight), d)?;
    let xw = tape.matmul(x, gates.input_t)?;
    let xw = tape.add(xw, pv.get(ParamId::EncoderBias))?;
    let zero = tape.constant(Tensor::zeros(&[d]));
    let mut state = DecoderState { hidden: zero, cell: zero };
    let mut hs = Vec::with_capacity(context.len());
    for i in 0..context.len() {
        let row = tape.row(xw, i)?;
        state = lstm_cell(tape, row, gates.hidden_t, state, d)?;
        hs.push(state.hidden);
    }
    let states = tape.stack(&hs)?;
    let states = dropout.apply(tape, states)?;
    Ok(EncoderOutput { states, final_hidden: state.hidden, final_cell: state.cell, len: context.len() })
}

fn attention_memory(tape: &mut Tape<'_>, memory: Var, w1: Var, w2: Var, v: Var, d: usize) -> Result<AttentionMemory> {
    let w1t = tape.transpose(w1)?;
    let mem_t = tape.slice_rows(w1t, 0, d)?;
    let query_weight_t = tape.slice_rows(w1t, d, d)?;
    let projected = tape.matmul(memory, mem_t)?;
    let w2_t = tape.transpose(w2)?;
    Ok(AttentionMemory { projected, query_weight_t, w2_t, v })
}

/// `v^T tanh(W2 tanh(W1 [m_i; query]))` for every memory row `m_i`.
pub fn attention_scores(tape: &mut Tape<'_>, mem: &AttentionMemory, query: Var) -> Result<Var> {
    let q = tape.matmul(query, mem.query_weight_t)?;
    let z1 = tape.add(mem.projected, q)?;
    let z1 = tape.tanh(z1);
    let z2 = tape.matmul(z1, mem.w2_t)?;
    let z2 = tape.tanh(z2);
    Ok(tape.matmul(z2, mem.v)?)
}

/// Attention over encoder states: returns `(context, weights)`.
pub fn encoder_attention(tape: &mut Tape<'_>, mem: &AttentionMemory, states: Var, query: Var) -> Result<(Var, Var)> {
    let scores = attention_scores(tape, mem, query)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(weights, states)?;
    Ok((context, weights))
}

/// Adds KB scores to `logits` at the canonical-token slots. Triples that
/// share a slot have their scores summed.
pub fn kb_attention(tape: &mut Tape<'_>, kb: &KbMemory, query: Var, logits: Var) -> Result<(Var, Var)> {
    let scores = attention_scores(tape, &kb.scorer, query)?;
    let out = tape.scatter_add(logits, scores, kb.slots.clone())?;
    Ok((out, scores))
}

/// Precomputes the per-example pieces used by every decoder step.
pub fn prepare(tape: &mut Tape<'_>, pv: &ParamVars, config: &ModelConfig, encoder: EncoderOutput, kb: &KbPlan) -> Result<DecodeContext> {
    let d = config.dim;
    let enc_attention = if config.use_encoder_attention {
        Some(attention_memory(tape, encoder.states, pv.get(ParamId::EncAttnW1), pv.get(ParamId::EncAttnW2), pv.get(ParamId::EncAttnV), d)?)
    } else {
        None
    };
    let kb = if config.use_kb_attention && !kb.is_empty() {
        check_ids(&kb.slots, config.vocab_size())?;
        let keys = tape.embedding(pv.get(ParamId::Embedding), kb.key_bags.clone())?;
        let scorer = attention_memory(tape, keys, pv.get(ParamId::KbAttnW1), pv.get(ParamId::KbAttnW2), pv.get(ParamId::KbAttnV), d)?;
        Some(KbMemory { scorer, slots: kb.slots.clone() })
    } else {
        None
    };
    let gates = split_gates(tape, pv.get(ParamId::DecoderWeight), d)?;
    let zero_context = tape.constant(Tensor::zeros(&[d]));
    Ok(DecodeContext {
        encoder,
        enc_attention,
        kb,
        dec_input_t: gates.input_t,
        dec_hidden_t: gates.hidden_t,
        dec_bias: pv.get(ParamId::DecoderBias),
        output: pv.get(ParamId::OutputProjection),
        zero_context,
        dim: d,
    })
}

impl DecodeContext {
    pub fn initial_state(&self) -> DecoderState {
        DecoderState { hidden: self.encoder.final_hidden, cell: self.encoder.final_cell }
    }

    /// Input-gate contributions `x_t W_x^T + b` for a batch of decoder input tokens, `[T, 4d]`.
    pub fn input_gates(&self, tape: &mut Tape<'_>, pv: &ParamVars, tokens: &[usize], dropout: &mut Dropout) -> Result<Var> {
        let x = tape.embedding(pv.get(ParamId::Embedding), tokens.iter().map(|&t| vec![t]).collect())?;
        let x = dropout.apply(tape, x)?;
        let xw = tape.matmul(x, self.dec_input_t)?;
        Ok(tape.add(xw, self.dec_bias)?)
    }
}

/// One decoder step given the input gates of the previous token.
pub fn decode_step(tape: &mut Tape<'_>, ctx: &DecodeContext, input_gates: Var, state: DecoderState, dropout: &mut Dropout) -> Result<StepOutput> {
    let state = lstm_cell(tape, input_gates, ctx.dec_hidden_t, state, ctx.dim)?;
    let query = dropout.apply(tape, state.hidden)?;
    let (context, attention) = match &ctx.enc_attention {
        Some(mem) => {
            let (c, w) = encoder_attention(tape, mem, ctx.encoder.states, query)?;
            (c, Some(w))
        }
        None => (ctx.zero_context, None),
    };
    let features = tape.concat(&[query, context])?;
    let logits = tape.matmul(ctx.output, features)?;
    let (logits, kb_scores) = match &ctx.kb {
        Some(kb) => {
            let (l, s) = kb_attention(tape, kb, query, logits)?;
            (l, Some(s))
        }
        None => (logits, None),
    };
    Ok(StepOutput { logits, attention, kb_scores, context, state })
}

/// Teacher-forced loss of one response.
#[derive(Debug, Clone)]
pub struct SequenceLoss {
    /// Mean token cross-entropy plus the L2 term.
    pub loss: Var,
    pub cross_entropy: f64,
    pub tokens: usize,
    /// Steps whose argmax equals the gold token.
    pub correct: usize,
}

/// Mean per-token cross-entropy of `response` followed by EOS, with
/// `l2 * Σ‖W‖²` over the penalized weights when `l2 > 0`.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss(
    tape: &mut Tape<'_>,
    pv: &ParamVars,
    config: &ModelConfig,
    vocab_eos: usize,
    vocab_bos: usize,
    context: &[usize],
    response: &[usize],
    kb: &KbPlan,
    l2: f64,
    dropout: &mut Dropout,
) -> Result<SequenceLoss> {
    check_ids(response, config.vocab_size())?;
    let encoder = encode(tape, pv, config, context, dropout)?;
    let ctx = prepare(tape, pv, config, encoder, kb)?;
    let inputs: Vec<usize> = std::iter::once(vocab_bos).chain(response.iter().copied()).collect();
    let targets: Vec<usize> = response.iter().copied().chain(std::iter::once(vocab_eos)).collect();
    let gates = ctx.input_gates(tape, pv, &inputs, dropout)?;
    let mut state = ctx.initial_state();
    let mut losses = Vec::with_capacity(targets.len());
    let mut correct = 0;
    for (t, &target) in targets.iter().enumerate() {
        let g = tape.row(gates, t)?;
        let step = decode_step(tape, &ctx, g, state, dropout)?;
        state = step.state;
        if tape.value(step.logits).argmax() == target {
            correct += 1;
        }
        losses.push(tape.cross_entropy(step.logits, target)?);
    }
    let total = tape.add_all(&losses)?;
    let ce = tape.scale(total, 1.0 / targets.len() as f64);
    let cross_entropy = tape.value(ce).item();
    let loss = if l2 > 0.0 {
        let mut terms = Vec::new();
        for id in ParamId::ALL.into_iter().filter(|p| p.is_penalized()) {
            terms.push(tape.sum_squares(pv.get(id)));
        }
        let sq = tape.add_all(&terms)?;
        let penalty = tape.scale(sq, l2);
        tape.add(ce, penalty)?
    } else {
        ce
    };
    Ok(SequenceLoss { loss, cross_entropy, tokens: targets.len(), correct })
}

/// Output of [`decode_greedy`], with per-step attention traces.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyDecode {
    /// Emitted token ids, EOS excluded.
    pub tokens: Vec<usize>,
    pub reached_eos: bool,
    pub encoder_weights: Vec<Vec<f64>>,
    /// Raw KB scores per step, aligned with [`KbPlan::positions`].
    pub kb_scores: Vec<Vec<f64>>,
}

/// Argmax decoding from BOS until EOS or `max_len` steps.
pub fn decode_greedy(params: &ModelParams, config: &ModelConfig, context: &[usize], kb: &KbPlan, bos: usize, eos: usize, max_len: usize) -> Result<GreedyDecode> {
    if params.dim() != config.dim {
        return Err(ModelError::DimMismatch { params: params.dim(), config: config.dim });
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let mut off = Dropout::disabled();
    let encoder = encode(&mut tape, &pv, config, context, &mut off)?;
    let ctx = prepare(&mut tape, &pv, config, encoder, kb)?;
    let mut state = ctx.initial_state();
    let mut prev = bos;
    let mut out = GreedyDecode { tokens: Vec::new(), reached_eos: false, encoder_weights: Vec::new(), kb_scores: Vec::new() };
    for _ in 0..max_len.max(1) {
        let gates = ctx.input_gates(&mut tape, &pv, &[prev], &mut off)?;
        let g = tape.row(gates, 0)?;
        let step = decode_step(&mut tape, &ctx, g, state, &mut off)?;
        state = step.state;
        if let Some(a) = step.attention {
            out.encoder_weights.push(tape.value(a).data().to_vec());
        }
        if let Some(s) = step.kb_scores {
            out.kb_scores.push(tape.value(s).data().to_vec());
        }
        let next = tape.value(step.logits).argmax();
        if next == eos {
            out.reached_eos = true;
            break;
        }
        out.tokens.push(next);
        prev = next;
    }
    Ok(out)
}
