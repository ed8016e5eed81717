//! Stub text encoder: a contextless, seeded embedding lookup.
//!
//! Vocabulary words map to fixed rows of a frozen table (identical in
//! every layer); concept tokens resolve through a [`ConceptLookup`] to
//! learnable layer-wise rows. There is no attention here on purpose:
//! concept-token gradients stay local and layer-wise tokens stay
//! independent.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};

use super::ModelConfig;

/// Words the toy vocabulary can spell. Index in this list is the row
/// index in the embedding table.
pub const WORDS: &[&str] = &[
    "photo", "of", "a", "the", "on", "in", "with", "and", "style", "painting", "toy", "object",
    "pattern", "bright", "dark", "left", "right", "top", "bottom", "plain", "thing", "blob",
    "stripes", "scene", "texture", "image", "art", "soft", "sharp", "empty",
];

const TEXT_TABLE_STREAM: u64 = 0x5465;

/// One prompt token: either a vocabulary word or a concept token
/// (angle-bracketed in prompt strings, e.g. `<v1>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptToken {
    Word(usize),
    Concept(String),
}

/// An ordered, length-bounded token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    tokens: Vec<PromptToken>,
}

impl PromptSpec {
    /// Parses a whitespace-separated prompt. Tokens wrapped in `<...>`
    /// are concept tokens; everything else must be a vocabulary word.
    pub fn parse(text: &str, max_len: usize) -> Result<Self> {
        let mut tokens = Vec::new();
        for raw in text.split_whitespace() {
            if raw.starts_with('<') && raw.ends_with('>') && raw.len() > 2 {
                tokens.push(PromptToken::Concept(raw.to_string()));
            } else {
                let idx = WORDS
                    .iter()
                    .position(|w| *w == raw)
                    .ok_or_else(|| Error::Vocabulary(raw.to_string()))?;
                tokens.push(PromptToken::Word(idx));
            }
        }
        Self::from_tokens(tokens, max_len)
    }

    pub fn from_tokens(tokens: Vec<PromptToken>, max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::Config(format!(
                "prompt has {} tokens, limit is {max_len}",
                tokens.len()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[PromptToken] {
        &self.tokens
    }

    /// Names of the concept tokens, in prompt order.
    pub fn concept_tokens(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                PromptToken::Concept(name) => Some(name.as_str()),
                PromptToken::Word(_) => None,
            })
            .collect()
    }

    pub fn display(&self) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                PromptToken::Word(i) => WORDS[*i].to_string(),
                PromptToken::Concept(name) => name.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Layer-indexed token-embedding matrices, one `[n_e, d]` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub per_layer: Vec<Tensor>,
}

/// Source of layer-wise concept-token rows.
pub trait ConceptLookup {
    /// The layer-`layer` embedding row for concept token `name`, if the
    /// token is registered.
    fn concept_row(&self, name: &str, layer: usize) -> Option<Vec<f64>>;
}

/// Lookup with no registered concepts.
impl ConceptLookup for () {
    fn concept_row(&self, _name: &str, _layer: usize) -> Option<Vec<f64>> {
        None
    }
}

/// The frozen embedding table plus prompt geometry.
pub struct TextEncoder {
    table: Tensor,
    layers: usize,
    prompt_len: usize,
}

impl TextEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        assert!(cfg.vocab_size >= WORDS.len(), "vocabulary table smaller than word list");
        let mut rng = Rng::new(cfg.seed).derive(TEXT_TABLE_STREAM);
        let table = rng.normal_tensor(&[cfg.vocab_size, cfg.embed_dim]);
        Self { table, layers: cfg.layers, prompt_len: cfg.prompt_len }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    /// Table row for a vocabulary word, used to initialize concept tokens.
    pub fn word_row(&self, word: &str) -> Result<Vec<f64>> {
        let idx = WORDS
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::Vocabulary(word.to_string()))?;
        Ok(self.table.row(idx).to_vec())
    }

    /// SHA-256 over the table bytes; training must leave this unchanged.
    pub fn table_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.table.bytes_le());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The layer-independent part of a prompt's embedding: a `[n_e, d]`
/// matrix holding vocabulary rows (zeros at concept and padded
/// positions), plus the positions and names of the concept tokens.
pub fn prompt_layout(
    prompt: &PromptSpec,
    enc: &TextEncoder,
) -> Result<(Tensor, Vec<(usize, String)>)> {
    let d = enc.embed_dim();
    let mut base = Tensor::zeros(&[enc.prompt_len(), d]);
    let mut concepts = Vec::new();
    for (pos, token) in prompt.tokens().iter().enumerate() {
        match token {
            PromptToken::Word(idx) => {
                base.data_mut()[pos * d..(pos + 1) * d].copy_from_slice(enc.table.row(*idx));
            }
            PromptToken::Concept(name) => concepts.push((pos, name.clone())),
        }
    }
    Ok((base, concepts))
}

/// Embeds a prompt: vocabulary rows come from the fixed table (identical
/// across layers), concept rows from the lookup's layer-wise values, and
/// padded rows are zero.
pub fn encode_prompt(
    prompt: &PromptSpec,
    enc: &TextEncoder,
    concepts: &dyn ConceptLookup,
) -> Result<PromptEmbedding> {
    let (base, concept_rows) = prompt_layout(prompt, enc)?;
    let d = enc.embed_dim();
    let mut per_layer = Vec::with_capacity(enc.layers());
    for layer in 0..enc.layers() {
        let mut m = base.clone();
        for (pos, name) in &concept_rows {
            let row = concepts
                .concept_row(name, layer)
                .ok_or_else(|| Error::Vocabulary(name.clone()))?;
            m.data_mut()[pos * d..(pos + 1) * d].copy_from_slice(&row);
        }
        per_layer.push(m);
    }
    Ok(PromptEmbedding { per_layer })
}
