//! Chat sessions over a trained checkpoint.
//!
//! A session holds one KB and the running dialogue. Each user message is
//! canonicalized against the session's KB, the whole history is encoded, a
//! response is decoded greedily and its canonical tokens are rendered as
//! surface text through the inverse lexicon.

use crate::checkpoint::Checkpoint;
use crate::corpus::{canonicalize, tokenize, Domain, RawKb, Speaker};
use crate::kbstore::{normalize_for_domain, sample_surface, TripleStore};
use crate::network::{decode_greedy, KbPlan, ModelError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

pub const DEFAULT_CHECKPOINT: &str = "default";

/// What to do with a message for a session that is still answering one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusyPolicy {
    #[default]
    Queue,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub max_decode_len: usize,
    pub busy: BusyPolicy,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_decode_len: 40, busy: BusyPolicy::Queue }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("no session with id '{0}'")]
    SessionNotFound(String),
    #[error("no checkpoint named '{0}'")]
    CheckpointNotFound(String),
    #[error("invalid KB: {}", .0.join("; "))]
    InvalidKb(Vec<String>),
    #[error("message text is empty")]
    EmptyMessage,
    #[error("session '{0}' is busy with another message")]
    Busy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub text: String,
    pub canonical: Vec<String>,
}

/// Attention recorded for each generated token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Weights over the encoded history tokens; each row sums to 1.
    pub encoder: Vec<Vec<f64>>,
    /// Softmax of the KB scores over the session's triples, in store order
    /// (triples that take no part in retrieval get 0).
    pub kb: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub reply: String,
    pub canonical: Vec<String>,
    pub attention: AttentionTrace,
    /// Canonical tokens that could not be realized from this session's KB.
    pub unresolved: Vec<String>,
    /// Decoding stopped at the length limit before producing EOS.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub domain: Domain,
    pub checkpoint: String,
    pub kb: KbView,
    pub turns: Vec<TranscriptTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbView {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// `[subject, relation, object]` per triple, aligned with attention rows.
    pub triples: Vec<[String; 3]>,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    domain: Domain,
    kb: RawKb,
    store: TripleStore,
    plan: KbPlan,
    checkpoint: String,
    seed: u64,
    turns: Vec<TranscriptTurn>,
}

impl Session {
    pub fn store(&self) -> &TripleStore {
        &self.store
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            domain: self.domain,
            checkpoint: self.checkpoint.clone(),
            kb: KbView {
                columns: self.kb.columns.clone(),
                rows: self.kb.rows.clone(),
                triples: self.store.triples().iter().map(|t| [t.subject.join(" "), t.relation.join(" "), t.object.clone()]).collect(),
            },
            turns: self.turns.clone(),
        }
    }
}

/// Reads a KB in the corpus layout (`{"column_names": [...], "items": [...]}`),
/// as a bare list of row objects, or as `{"columns": [...], "rows": [[...]]}`.
pub fn parse_kb(value: &Value) -> Result<RawKb, ServerError> {
    match value {
        Value::Null => Ok(RawKb::default()),
        Value::Array(_) => RawKb::from_json_rows(value, None).map_err(ServerError::InvalidKb),
        Value::Object(o) if o.contains_key("rows") => {
            let kb: RawKb = serde_json::from_value(value.clone()).map_err(|e| ServerError::InvalidKb(vec![e.to_string()]))?;
            let bad: Vec<String> = kb
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.len() != kb.columns.len())
                .map(|(i, r)| format!("row {i}: {} cells for {} columns", r.len(), kb.columns.len()))
                .collect();
            if bad.is_empty() {
                Ok(kb)
            } else {
                Err(ServerError::InvalidKb(bad))
            }
        }
        Value::Object(o) => {
            RawKb::from_json_rows(o.get("items").unwrap_or(&Value::Null), o.get("column_names")).map_err(ServerError::InvalidKb)
        }
        other => Err(ServerError::InvalidKb(vec![format!("expected an object or array, got {other}")])),
    }
}

/// The domain whose subject column the KB has.
pub fn infer_domain(kb: &RawKb) -> Option<Domain> {
    Domain::ALL.into_iter().find(|&d| kb.column_index(crate::kbstore::subject_column(d)).is_some())
}

/// Joins tokens, attaching punctuation to the preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        let attach = matches!(t.as_str(), "." | "," | "!" | "?" | ";" | ":");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Sessions sharing read-only checkpoints.
pub struct SessionManager {
    checkpoints: HashMap<String, Arc<Checkpoint>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
    config: ServerConfig,
}

impl SessionManager {
    pub fn new(checkpoint: Checkpoint, config: ServerConfig) -> Self {
        let mut checkpoints = HashMap::new();
        checkpoints.insert(DEFAULT_CHECKPOINT.to_string(), Arc::new(checkpoint));
        Self { checkpoints, sessions: RwLock::new(HashMap::new()), counter: AtomicU64::new(0), config }
    }

    pub fn add_checkpoint(&mut self, name: &str, checkpoint: Checkpoint) {
        self.checkpoints.insert(name.to_string(), Arc::new(checkpoint));
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map lock").len()
    }

    pub fn create_session(&self, kb: RawKb, domain: Domain, checkpoint: Option<&str>, seed: Option<u64>) -> Result<String, ServerError> {
        let name = checkpoint.unwrap_or(DEFAULT_CHECKPOINT);
        let ckpt = self.checkpoints.get(name).ok_or_else(|| ServerError::CheckpointNotFound(name.to_string()))?;
        let store = normalize_for_domain(&kb, domain).map_err(|e| ServerError::InvalidKb(vec![e.to_string()]))?;
        let plan = KbPlan::new(&store, &ckpt.vocab);
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let id = format!("{:016x}{:04x}", rand::random::<u64>(), n & 0xffff);
        let session = Session { id: id.clone(), domain, kb, store, plan, checkpoint: name.to_string(), seed: seed.unwrap_or(0), turns: Vec::new() };
        self.sessions.write().expect("session map lock").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServerError> {
        self.sessions.read().expect("session map lock").get(id).cloned().ok_or_else(|| ServerError::SessionNotFound(id.to_string()))
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ServerError> {
        let s = self.session(id)?;
        let guard = s.lock().unwrap_or_else(|e| e.into_inner());
        Ok(guard.view())
    }

    pub fn remove(&self, id: &str) -> Result<(), ServerError> {
        self.sessions.write().expect("session map lock").remove(id).map(|_| ()).ok_or_else(|| ServerError::SessionNotFound(id.to_string()))
    }

    /// Appends the user's message, decodes a response and appends it.
    pub fn respond(&self, id: &str, text: &str) -> Result<Reply, ServerError> {
        let s = self.session(id)?;
        let mut session = match self.config.busy {
            BusyPolicy::Queue => s.lock().unwrap_or_else(|e| e.into_inner()),
            BusyPolicy::Reject => match s.try_lock() {
                Ok(g) => g,
                Err(std::sync::TryLockError::Poisoned(e)) => e.into_inner(),
                Err(std::sync::TryLockError::WouldBlock) => return Err(ServerError::Busy(id.to_string())),
            },
        };
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(ServerError::EmptyMessage);
        }
        let ckpt = self.checkpoints[&session.checkpoint].clone();
        let user = canonicalize(&tokens, &ckpt.lexicon, &session.store);

        let mut context: Vec<String> = session.turns.iter().flat_map(|t| t.canonical.iter().cloned()).collect();
        context.extend(user.iter().cloned());
        let ids = ckpt.vocab.encode_all(&context);
        let out = decode_greedy(&ckpt.params, &ckpt.model, &ids, &session.plan, ckpt.vocab.bos(), ckpt.vocab.eos(), self.config.max_decode_len)?;
        let canonical = ckpt.vocab.decode(&out.tokens);

        let turn_index = session.turns.len() as u64 / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(session.seed);
        rng.set_stream(turn_index);
        let mut surface = Vec::with_capacity(canonical.len());
        let mut unresolved = Vec::new();
        let mut kb_trace = Vec::with_capacity(canonical.len());
        for (step, token) in canonical.iter().enumerate() {
            let scores = out.kb_scores.get(step).map(|s| session.plan.scores_by_position(s));
            if let Some(t) = session.store.resolve(token, scores.as_deref()) {
                surface.push(sample_surface(&t.object, &ckpt.lexicon, &mut rng));
            } else if ckpt.vocab.is_canonical(token) {
                unresolved.push(token.clone());
                surface.push(token.clone());
            } else if ckpt.lexicon.is_global_entity_token(token) {
                surface.push(sample_surface(&token.replace('_', " "), &ckpt.lexicon, &mut rng));
            } else {
                surface.push(token.clone());
            }
        }
        for s in &out.kb_scores {
            let mut row = vec![0.0; session.store.len()];
            for (&p, w) in session.plan.positions.iter().zip(crate::autograd::softmax(s)) {
                row[p] = w;
            }
            kb_trace.push(row);
        }
        let reply = detokenize(&surface);
        session.turns.push(TranscriptTurn { speaker: Speaker::Driver, text: text.trim().to_string(), canonical: user });
        session.turns.push(TranscriptTurn { speaker: Speaker::Assistant, text: reply.clone(), canonical: canonical.clone() });
        Ok(Reply {
            reply,
            canonical,
            attention: AttentionTrace { encoder: out.encoder_weights, kb: kb_trace },
            unresolved,
            truncated: !out.reached_eos,
        })
    }
}
