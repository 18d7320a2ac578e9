//! Key-value retrieval network for task-oriented dialogue.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod kbstore;
pub mod metrics;
pub mod network;
pub mod server;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{Tape, Var};
pub use corpus::{Dialogue, Domain, Lexicon, Vocabulary};
pub use kbstore::{KbTriple, TripleStore};
pub use network::{Ablation, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use checkpoint::Checkpoint;
pub use trainer::TrainConfig;
