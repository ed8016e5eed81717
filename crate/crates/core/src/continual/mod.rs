//! Consolidation training: the regularized reconstruction loss and the
//! two-step optimizer.
//!
//! Step 1 of every batch updates the current task's adapters and
//! layer-wise concept tokens by gradients of the full loss while the
//! shared subspace stays frozen; step 2 (second task onward) freezes
//! those and applies the closed-form subspace descent updates.

mod loss;
mod optim;
mod subspace;
mod train;

pub use loss::{ccl_loss, r1_orth, r2_shared, LossBreakdown};
pub use optim::Adam;
pub use subspace::SharedSubspace;
pub use train::{learn_task, BaselineState, StepRecord, TaskOutcome, TrainConfig, TrainContext};
