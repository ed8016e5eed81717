//! The desk-scale diffusion substrate.
//!
//! A frozen, seeded base stack stands in for a pretrained model: a linear
//! noise schedule, a small transformer denoiser whose every layer carries
//! self-attention, cross-attention to layer-wise text embeddings and an
//! MLP, a contextless text-encoder stub with a fixed vocabulary table, and
//! a generator of synthetic latent concepts. The latent codec is the
//! identity: datasets and samples live directly on the latent grid.

mod config;
mod dataset;
mod denoiser;
mod schedule;
mod stack;
mod text;

pub use config::ModelConfig;
pub use stack::{BaseStack, StackView};
pub use dataset::{gen_concept_dataset, gen_concept_dataset_with_jitter, ConceptSpec, ConceptTokenSpec, PatternKind};
pub use denoiser::{
    forward, forward_tape, slot_count, slot_index, slot_name, CrossProj, DenoiserWeights,
    LayerHook, CROSS_PROJS,
};
pub use schedule::{make_schedule, Latent, NoiseSchedule};
pub use text::{
    encode_prompt, prompt_layout, ConceptLookup, PromptEmbedding, PromptSpec, PromptToken,
    TextEncoder, WORDS,
};
