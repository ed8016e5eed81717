//! The assembled frozen stack: one struct owning every seeded base piece.

use crate::error::Result;

use super::{make_schedule, DenoiserWeights, ModelConfig, NoiseSchedule, TextEncoder};

/// Owns the frozen base model: denoiser weights, text-encoder table and
/// noise schedule, all pinned by the model configuration's seed.
pub struct BaseStack {
    pub model: ModelConfig,
    pub weights: DenoiserWeights,
    pub enc: TextEncoder,
    pub sched: NoiseSchedule,
}

impl BaseStack {
    pub fn init(model: ModelConfig) -> Result<Self> {
        model.validate()?;
        let weights = DenoiserWeights::init(&model);
        let enc = TextEncoder::new(&model);
        let sched = make_schedule(model.timesteps, model.beta_start, model.beta_end)?;
        Ok(Self { model, weights, enc, sched })
    }

    pub fn view(&self) -> StackView<'_> {
        StackView { model: &self.model, weights: &self.weights, enc: &self.enc, sched: &self.sched }
    }
}

/// Borrowed view of the stack, passed into training and sampling.
#[derive(Clone, Copy)]
pub struct StackView<'a> {
    pub model: &'a ModelConfig,
    pub weights: &'a DenoiserWeights,
    pub enc: &'a TextEncoder,
    pub sched: &'a NoiseSchedule,
}
