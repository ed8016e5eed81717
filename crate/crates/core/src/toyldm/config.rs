//! Model configuration: the fixed dimensions of the base stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions and schedule endpoints of the toy stack. Every run artifact
/// records a hash of the full configuration, so two runs compare equal
/// only when all of these agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer layer count (L).
    pub layers: usize,
    /// Token feature dimension (d), shared by text rows and spatial tokens.
    pub embed_dim: usize,
    /// Maximum prompt length in tokens (n_e).
    pub prompt_len: usize,
    /// Latent grid height.
    pub grid_h: usize,
    /// Latent grid width.
    pub grid_w: usize,
    /// Latent channel count (d_z).
    pub latent_channels: usize,
    /// Hidden width of each layer's MLP.
    pub mlp_hidden: usize,
    /// Vocabulary table rows in the text-encoder stub.
    pub vocab_size: usize,
    /// Diffusion timestep count (T).
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Low-rank adapter rank (r).
    pub lora_rank: usize,
    /// Seed for the frozen base stack (vocabulary table and denoiser).
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            embed_dim: 16,
            prompt_len: 8,
            grid_h: 8,
            grid_w: 8,
            latent_channels: 4,
            mlp_hidden: 64,
            vocab_size: 32_768,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            lora_rank: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.embed_dim == 0 || self.prompt_len == 0 {
            return Err(Error::Config("layers, embed_dim and prompt_len must be positive".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.latent_channels == 0 {
            return Err(Error::Config("latent grid extents must be positive".into()));
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim {
            return Err(Error::Config(format!(
                "lora_rank {} must lie in 1..={}",
                self.lora_rank, self.embed_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        // Schedule endpoints are validated by make_schedule; checked here
        // too so a bad config file fails before any work happens.
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule endpoints must satisfy 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be at least 2".into()));
        }
        Ok(())
    }

    /// Spatial token count (h * w).
    pub fn grid_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Latent shape `[h, w, d_z]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.grid_h, self.grid_w, self.latent_channels]
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}
