use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Every trainable tensor of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    /// Token embeddings, `[|V|+n, d]`; also used for KB keys.
    Embedding,
    /// Encoder LSTM, `[4d, 2d]` over `[input; hidden]`, gate order i, f, g, o.
    EncoderWeight,
    EncoderBias,
    DecoderWeight,
    DecoderBias,
    /// Encoder-attention MLP: `[d, 2d]` over `[h_i; query]`.
    EncAttnW1,
    EncAttnW2,
    /// Encoder-attention output vector, `[d]`.
    EncAttnV,
    /// KB-attention MLP: `[d, 2d]` over `[key; query]`.
    KbAttnW1,
    KbAttnW2,
    KbAttnV,
    /// Output projection `[|V|+n, 2d]` over `[decoder hidden; attention context]`.
    OutputProjection,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        ParamId::Embedding,
        ParamId::EncoderWeight,
        ParamId::EncoderBias,
        ParamId::DecoderWeight,
        ParamId::DecoderBias,
        ParamId::EncAttnW1,
        ParamId::EncAttnW2,
        ParamId::EncAttnV,
        ParamId::KbAttnW1,
        ParamId::KbAttnW2,
        ParamId::KbAttnV,
        ParamId::OutputProjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Embedding => "embedding",
            ParamId::EncoderWeight => "encoder.weight",
            ParamId::EncoderBias => "encoder.bias",
            ParamId::DecoderWeight => "decoder.weight",
            ParamId::DecoderBias => "decoder.bias",
            ParamId::EncAttnW1 => "enc_attn.w1",
            ParamId::EncAttnW2 => "enc_attn.w2",
            ParamId::EncAttnV => "enc_attn.v",
            ParamId::KbAttnW1 => "kb_attn.w1",
            ParamId::KbAttnW2 => "kb_attn.w2",
            ParamId::KbAttnV => "kb_attn.v",
            ParamId::OutputProjection => "output.weight",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Whether the L2 penalty applies (weights only; not biases or embeddings).
    pub fn is_penalized(self) -> bool {
        !matches!(self, ParamId::Embedding | ParamId::EncoderBias | ParamId::DecoderBias)
    }

    pub fn is_bias(self) -> bool {
        matches!(self, ParamId::EncoderBias | ParamId::DecoderBias)
    }

    pub fn shape(self, dim: usize, vocab_size: usize) -> Vec<usize> {
        let d = dim;
        match self {
            ParamId::Embedding => vec![vocab_size, d],
            ParamId::EncoderWeight | ParamId::DecoderWeight => vec![4 * d, 2 * d],
            ParamId::EncoderBias | ParamId::DecoderBias => vec![4 * d],
            ParamId::EncAttnW1 | ParamId::KbAttnW1 => vec![d, 2 * d],
            ParamId::EncAttnW2 | ParamId::KbAttnW2 => vec![d, d],
            ParamId::EncAttnV | ParamId::KbAttnV => vec![d],
            ParamId::OutputProjection => vec![vocab_size, 2 * d],
        }
    }

    /// Inputs feeding each output unit, for fan-in scaled initialization.
    /// Embedding rows are selected by a one-hot input, so their fan-in is 1.
    pub fn fan_in(self, dim: usize) -> usize {
        match self {
            ParamId::Embedding => 1,
            ParamId::EncoderWeight | ParamId::DecoderWeight | ParamId::EncAttnW1 | ParamId::KbAttnW1 | ParamId::OutputProjection => 2 * dim,
            _ => dim,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
pub struct ParamShapeError {
    pub name: &'static str,
    pub expected: Vec<usize>,
    pub got: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dim: usize,
    vocab_size: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(dim: usize, vocab_size: usize) -> Self {
        let tensors = ParamId::ALL.iter().map(|p| Tensor::zeros(&p.shape(dim, vocab_size))).collect();
        Self { dim, vocab_size, tensors }
    }

    /// Uniform(±√(3/fan_in)) weights, zero biases except the LSTM forget
    /// gates, which start at 1. Every tensor is drawn regardless of which
    /// attention paths a model uses, so ablations share initial weights.
    pub fn init(dim: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = ParamId::ALL
            .iter()
            .map(|&p| {
                let shape = p.shape(dim, vocab_size);
                if p.is_bias() {
                    let mut b = Tensor::zeros(&shape);
                    b.data_mut()[dim..2 * dim].fill(1.0);
                    return b;
                }
                let bound = (3.0 / p.fan_in(dim) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
            })
            .collect();
        Self { dim, vocab_size, tensors }
    }

    /// Builds from tensors in [`ParamId::ALL`] order, checking every shape.
    pub fn from_tensors(dim: usize, vocab_size: usize, tensors: Vec<Tensor>) -> Result<Self, ParamShapeError> {
        for (id, t) in ParamId::ALL.iter().zip(&tensors) {
            let expected = id.shape(dim, vocab_size);
            if t.shape() != expected.as_slice() {
                return Err(ParamShapeError { name: id.name(), expected, got: t.shape().to_vec() });
            }
        }
        if tensors.len() != ParamId::ALL.len() {
            return Err(ParamShapeError { name: "<count>", expected: vec![ParamId::ALL.len()], got: vec![tensors.len()] });
        }
        Ok(Self { dim, vocab_size, tensors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Σ‖W‖² over the penalized parameters.
    pub fn penalized_sum_squares(&self) -> f64 {
        ParamId::ALL.iter().filter(|p| p.is_penalized()).map(|p| self.get(*p).sum_squares()).sum()
    }

    /// Registers every tensor on `tape` by reference.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.param(t)).collect())
    }
}

/// Tape handles for the parameters, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn new(vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), ParamId::ALL.len(), "one var per parameter");
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
