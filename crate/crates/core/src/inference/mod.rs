//! Inference-time machinery: elastic merging of stored learners,
//! regional cross-attention, region noise estimation and the sampler.

mod merge;
mod region;
mod sampler;

pub use merge::{ewa_merge, psi_normalize, semantic_relation, task_embeddings, MergeReport};
pub use region::{
    apply_regions, regional_cross_attention, AttentionKind, BoundingBox, RegionCondition,
    RegionMask,
};
pub use sampler::{
    aggregate_noise, guide, region_noise_estimate, sample, GuidanceConfig, SampleOutput,
};
