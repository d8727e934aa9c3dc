//! A tiny frozen decoder-only vision-language model with layer hooks.

mod config;
mod hooks;
mod model;
mod pretrain;

pub use config::VlmConfig;
pub use hooks::{Capture, HookAction, HookRunner, HookSpec, Intervention, Passthrough, SpanTarget};
pub(crate) use hooks::splice_rows;
pub use model::{argmax, greedy_decode_by, Block, Bound, ForwardRecord, Vlm};
pub use pretrain::{pretrain, probe_token_accuracy, PretrainConfig, PretrainReport};
pub use sequence::{Modality, SpanLayout, Supervised, TokenSequence};

mod sequence;
