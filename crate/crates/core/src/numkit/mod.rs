//! Minimal dense numeric kernel.
//!
//! Everything downstream is built on three pieces: a row-major [`Tensor`]
//! with a fixed, sequential accumulation order (bitwise-deterministic by
//! construction), a seeded [`Rng`], and a reverse-mode [`GradTape`] whose
//! output is checked against the [`finite_diff`] oracle in every gradient
//! test. No parallel reductions anywhere.

mod fdiff;
mod rng;
mod tape;
mod tensor;

pub use fdiff::{finite_diff, max_rel_err};
pub use rng::Rng;
pub use tape::{GradTape, VarId};
pub use tensor::Tensor;
