//! Word-level tokenizer, decoder-only transformer and its checkpoint format.

pub mod checkpoint;
pub mod model;
pub mod pretrain;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use model::{BaseLM, Mode, ModelConfig, NoHook, PackedInput, Projection, ProjectionHook};
pub use pretrain::{perplexity, pretrain_base, PretrainConfig, PretrainReport};
pub use vocab::{normalize, TokenId, Vocabulary, DEFAULT_MAX_TOKENS, DEFAULT_VOCAB_SIZE};
