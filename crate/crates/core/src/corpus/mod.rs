//! Corpus ingestion: the released in-car dialogue JSON, entity
//! canonicalization, vocabulary construction and stratified splits.

mod dialogue;
mod lexicon;
mod split;
mod tokenize;
mod vocab;

pub use dialogue::{load_corpus, parse_corpus, CorpusError, Dialogue, Domain, LoadedCorpus, RawKb, RecordError, Speaker, Turn, MISSING};
pub use lexicon::{canonicalize, Lexicon};
pub use split::{split, SplitManifest, Splits};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};
