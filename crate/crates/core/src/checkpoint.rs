//! Versioned binary checkpoints.
//!
//! Layout: the magic bytes `KVRETCKP`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header (model config, training config,
//! vocabulary, lexicon, and the name and shape of every tensor), then the
//! tensor values as little-endian `f64` in header order.

use crate::corpus::{Lexicon, Vocabulary};
use crate::network::{ModelConfig, ModelParams, ParamId};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"KVRETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub params: ModelParams,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {FORMAT_VERSION})")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint tensor '{name}' has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint tensors {got:?} do not match the expected list {expected:?}")]
    TensorNames { expected: Vec<String>, got: Vec<String> },
    #[error("vocabulary of {vocab} tokens does not match the model output size {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("{0} trailing bytes after tensor data")]
    Trailing(usize),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    vocab: Vocabulary,
    lexicon: Lexicon,
    tensors: Vec<TensorEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            lexicon: self.lexicon.clone(),
            tensors: ParamId::ALL
                .iter()
                .map(|&p| TensorEntry { name: p.name().to_string(), shape: self.params.get(p).shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
        let header: Header = serde_json::from_slice(r.take(len as usize, "header")?)?;

        let expected: Vec<String> = ParamId::ALL.iter().map(|p| p.name().to_string()).collect();
        let got: Vec<String> = header.tensors.iter().map(|t| t.name.clone()).collect();
        if expected != got {
            return Err(CheckpointError::TensorNames { expected, got });
        }
        let vocab_size = header.model.vocab_size();
        if header.vocab.len() != vocab_size {
            return Err(CheckpointError::VocabMismatch { vocab: header.vocab.len(), model: vocab_size });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (entry, id) in header.tensors.iter().zip(ParamId::ALL) {
            let want = id.shape(header.model.dim, vocab_size);
            if entry.shape != want {
                return Err(CheckpointError::Shape { name: entry.name.clone(), expected: want, got: entry.shape.clone() });
            }
            let n: usize = want.iter().product();
            let raw = r.take(8 * n, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor::new(want, data).expect("checked shape"));
        }
        if !r.bytes.is_empty() {
            return Err(CheckpointError::Trailing(r.bytes.len()));
        }
        let params = ModelParams::from_tensors(header.model.dim, vocab_size, tensors).expect("checked shapes");
        Ok(Self { model: header.model, train: header.train, vocab: header.vocab, lexicon: header.lexicon, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::from_parts(vec!["hi".into(), "there".into()], vec!["dinner_time".into()]);
        let model = ModelConfig::new(3, &vocab);
        let mut counts = BTreeMap::new();
        counts.insert("8pm".to_string(), BTreeMap::from([("8pm".to_string(), 2), ("8 pm".to_string(), 1)]));
        Checkpoint {
            params: ModelParams::init(3, vocab.len(), 4),
            model,
            train: Some(TrainConfig::default()),
            vocab,
            lexicon: Lexicon::from_counts(counts),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
        assert_eq!(back.lexicon.surfaces("8pm"), c.lexicon.surfaces("8pm"));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version(9))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Trailing(1))));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut c = sample();
        c.model.dim = 4;
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Shape { .. })));
    }
}
