//! Class-text embeddings: prompt ensembles, text expansion, background phrases and
//! auxiliary texts.

pub mod aux;
mod bank;
mod encoder;
pub mod templates;
mod tokenizer;
mod vocab;

pub use aux::{
    auxiliary_prompt, generate_auxiliary_text, AuxCache, AuxEntry, AuxKind, ChatCompletionsClient, CommandClient,
    LlmClient,
};
pub use bank::{build_class_embeddings, ensemble_embeddings, fuse_auxiliary, AuxSource, TextBank};
pub use encoder::{ClipTextEncoder, HashingTextEncoder, TextEncoder, TextWeights};
pub use tokenizer::{byte_level_vocabulary, ClipTokenizer, CONTEXT_LENGTH};
pub use vocab::{attach_background, load_background, parse_background, BankRow, ClassEntry, RowKind, Vocabulary};
