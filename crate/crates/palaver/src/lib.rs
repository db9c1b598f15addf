//! Small-scale dialogue language modeling, end to end.
//!
//! The pieces, in pipeline order:
//!
//! - [`corpus`]: rebuild reply trees from raw comment records, extract
//!   (context, response) samples along root-to-node paths, assign
//!   multi-party role ids, and filter.
//! - [`tokenizer`]: train and apply a byte-pair-encoding vocabulary.
//! - [`batching`]: pack samples into aligned id streams under a prefix
//!   attention mask, and group them by length to keep padding small.
//! - [`model`]: the generation network — summed token/position/type/role
//!   embeddings, pre-norm transformer blocks, NLL loss, and exact
//!   hand-written gradients.
//! - [`training`]: Adam with linear warmup/decay, deterministic resumable
//!   runs, CSV metrics.
//! - [`inference`]: greedy/top-k/top-p decoding, perplexity, and a
//!   self-chat harness with distinct-n diversity scoring.
//!
//! Everything runs deterministically on CPU; see the `examples/` directory
//! for one runnable walkthrough per capability.

pub mod batching;
pub mod cli;
pub mod corpus;
pub mod inference;
pub mod model;
pub mod tensorfile;
pub mod tokenizer;
pub mod training;

pub use batching::{build_prefix_mask, group_by_length, pack, Batch, PackLimits, PackedSample};
pub use corpus::{
    assign_roles, build_corpus, build_trees, clean, extract_samples, CleaningConfig, CommentNode,
    DialogueSample, MessageTree, Turn,
};
pub use inference::{distinct_n, generate, perplexity, self_chat, ChatState, DecodeConfig};
pub use model::{backward, embed, forward, init_params, nll_loss, ModelConfig, ModelParameters};
pub use tokenizer::{decode, encode, train_bpe, Vocabulary};
pub use training::{adam_step, lr_at, AdamConfig, ScheduleConfig, TrainRunConfig, TrainSession};
