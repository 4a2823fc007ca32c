//! Per-class identifiers and fine-tuning of a denoiser under textual
//! inversion (TI), low-rank adapter tuning (DB) or both jointly.

mod adapters;
mod checkpoint;
mod container;
mod finetune;
mod identifiers;

pub use crate::nn::LowRankAdapter;
pub use adapters::{attach_adapters, Adaptable};
pub use checkpoint::{load_denoiser, save_denoiser, PersonalizedCheckpoint};
pub use container::{Container, CONTAINER_VERSION};
pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome, FinetuneRun, FinetuneStrategy};
pub use identifiers::{build_prompt, EncodedPrompt, IdentifierTable, PromptEncoder, PromptMode, ToyTextEncoder};
