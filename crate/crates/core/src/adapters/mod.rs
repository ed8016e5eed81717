//! Low-rank adapter containers, per-task learners and their persistence.
//!
//! A task learner bundles every layer's cross-attention adapters with the
//! layer-wise concept-token embeddings learned for that task. Learners
//! are immutable once finalized; the [`LearnerStore`] keeps them on disk
//! in learning order behind a manifest and rejects duplicate concept
//! tokens across tasks.

mod format;
mod learner;
mod lora;
mod store;

pub use format::TensorFile;
pub use learner::{init_task_learner, load_learner, save_learner, LearnerMeta, TaskLearner};
pub use lora::LoraLayer;
pub use store::{LearnerStore, StoreManifest};
