//! Text side of the model: byte-level BPE tokenization and the unified id
//! space over text tokens, latent codes, and special tokens.

mod bpe;
mod vocab;

pub use bpe::{load_bpe, save_bpe, train_bpe, BpeModel};
pub use vocab::{make_unified_vocab, TokenSeq, UnifiedVocab};
