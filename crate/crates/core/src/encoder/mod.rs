//! Tokenization, vocabulary and the dot-product bi-encoder shared by the
//! linking and chat models.

pub mod checkpoint;
pub mod model;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{grad_score, score_matrix, BiEncoderParams, Grads, Role, Tower, TowerKind};
pub use vocab::{build_vocab, split_tokens, tokenize, Vocab};
