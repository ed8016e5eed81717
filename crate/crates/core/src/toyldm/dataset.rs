//! Synthetic concept dataset: deterministic latent patterns plus prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};

use super::{Latent, ModelConfig, PromptSpec, PromptToken, WORDS};

/// Pattern family of a synthetic concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternKind {
    /// Gaussian bump at `center` (grid coordinates) with the given radius.
    Blob { center: [f64; 2], radius: f64 },
    /// Sinusoidal stripes along `angle` radians with spatial `frequency`.
    Stripes { angle: f64, frequency: f64 },
}

/// A concept token and the vocabulary word whose row initializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTokenSpec {
    pub name: String,
    pub init_word: String,
}

/// One synthetic personalized concept: a deterministic canonical latent
/// pattern and one or two concept tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: String,
    #[serde(flatten)]
    pub pattern: PatternKind,
    /// Per-channel signature, length `d_z`.
    pub channels: Vec<f64>,
    pub tokens: Vec<ConceptTokenSpec>,
}

impl ConceptSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.channels.len() != cfg.latent_channels {
            return Err(Error::Config(format!(
                "concept {:?} has {} channel weights, latent has {} channels",
                self.id,
                self.channels.len(),
                cfg.latent_channels
            )));
        }
        if self.tokens.is_empty() || self.tokens.len() > 2 {
            return Err(Error::Config(format!(
                "concept {:?} must declare 1 or 2 tokens, has {}",
                self.id,
                self.tokens.len()
            )));
        }
        for t in &self.tokens {
            if !(t.name.starts_with('<') && t.name.ends_with('>') && t.name.len() > 2) {
                return Err(Error::Config(format!(
                    "concept token {:?} must be angle-bracketed",
                    t.name
                )));
            }
            if !WORDS.contains(&t.init_word.as_str()) {
                return Err(Error::Vocabulary(t.init_word.clone()));
            }
        }
        Ok(())
    }

    /// The deterministic canonical latent for this concept.
    pub fn canonical_pattern(&self, cfg: &ModelConfig) -> Latent {
        let [h, w, c] = cfg.latent_shape();
        let t = Tensor::from_fn(&[h, w, c], |flat| {
            let ch = flat % c;
            let pix = flat / c;
            let (y, x) = ((pix / w) as f64, (pix % w) as f64);
            let spatial = match &self.pattern {
                PatternKind::Blob { center, radius } => {
                    let dy = y - center[0];
                    let dx = x - center[1];
                    (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp()
                }
                PatternKind::Stripes { angle, frequency } => {
                    (frequency * (x * angle.cos() + y * angle.sin())).sin()
                }
            };
            self.channels[ch] * spatial
        });
        Latent::new(t).expect("canonical pattern is finite")
    }

    /// Canonical prompt: `photo of a <tok...>`.
    pub fn prompt(&self, cfg: &ModelConfig) -> Result<PromptSpec> {
        let mut tokens = vec![
            PromptToken::Word(word_index("photo")),
            PromptToken::Word(word_index("of")),
            PromptToken::Word(word_index("a")),
        ];
        for t in &self.tokens {
            tokens.push(PromptToken::Concept(t.name.clone()));
        }
        PromptSpec::from_tokens(tokens, cfg.prompt_len)
    }
}

fn word_index(word: &str) -> usize {
    WORDS.iter().position(|w| *w == word).expect("word in vocabulary")
}

/// `n` training pairs: canonical pattern plus seeded jitter of the given
/// amplitude, each paired with the concept's canonical prompt.
pub fn gen_concept_dataset_with_jitter(
    spec: &ConceptSpec,
    n: usize,
    rng: &mut Rng,
    cfg: &ModelConfig,
    jitter: f64,
) -> Result<Vec<(Latent, PromptSpec)>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    spec.validate(cfg)?;
    let canonical = spec.canonical_pattern(cfg);
    let prompt = spec.prompt(cfg)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let noise = rng.normal_tensor_scaled(canonical.tensor().shape(), jitter);
        let latent = Latent::new(canonical.tensor().add(&noise)?)?;
        out.push((latent, prompt.clone()));
    }
    Ok(out)
}

/// Default jitter amplitude for concept datasets.
pub const DATASET_JITTER: f64 = 0.05;

/// Standard dataset: jitter amplitude 0.05, default n of 4.
pub fn gen_concept_dataset(
    spec: &ConceptSpec,
    n: usize,
    rng: &mut Rng,
    cfg: &ModelConfig,
) -> Result<Vec<(Latent, PromptSpec)>> {
    gen_concept_dataset_with_jitter(spec, n, rng, cfg, DATASET_JITTER)
}
