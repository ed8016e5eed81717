//! Desk-scale incremental customization for a toy latent diffusion model.
//!
//! The crate is organized around the life cycle of a customization task:
//!
//! - [`numkit`] — dense tensor kernel, seeded RNG, reverse-mode gradient
//!   tape and a finite-difference oracle used by every gradient test.
//! - [`toyldm`] — the frozen base stack: noise schedule, forward noising,
//!   a small transformer denoiser with per-layer cross-attention, a stub
//!   text encoder with learnable layer-wise concept tokens, and a
//!   synthetic-concept dataset generator.
//! - [`adapters`] — low-rank adapter containers, per-task learners and
//!   their bit-exact persistence.
//! - [`continual`] — the consolidation loss (reconstruction + subspace
//!   orthogonality + shared-subspace residual) and the two-step trainer.
//! - [`inference`] — elastic merging of stored learners, regional
//!   cross-attention, region noise estimation and the sampling loop.
//! - [`artifact`] — PGM / raw-float dumps and report writers.

pub mod adapters;
pub mod artifact;
pub mod continual;
pub mod error;
pub mod inference;
pub mod numkit;
pub mod toyldm;

pub use error::{Error, Result};
