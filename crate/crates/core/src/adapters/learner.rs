//! Per-task learner: adapters plus learned layer-wise concept tokens.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};
use crate::toyldm::{
    slot_count, slot_name, ConceptLookup, ConceptSpec, ModelConfig, TextEncoder, CROSS_PROJS,
};

use super::{LoraLayer, TensorFile};

/// Standard deviation for fresh down-factor entries; up factors start at
/// zero so a fresh learner is an exact no-op.
pub const INIT_STD: f64 = 0.02;

/// Everything learned for one customization task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLearner {
    /// 1-based position in the learning order.
    pub task_id: usize,
    /// Concept metadata (patterns, token identifiers).
    pub concepts: Vec<ConceptSpec>,
    /// One adapter per cross-attention projection, slot-major.
    pub lora: Vec<LoraLayer>,
    /// Concept-token rows per layer: `[n_tokens, d]` each.
    pub token_embeddings: Vec<Tensor>,
    /// Row order of `token_embeddings`.
    pub token_names: Vec<String>,
}

impl TaskLearner {
    /// Dense per-slot updates in slot order.
    pub fn deltas(&self) -> Vec<Tensor> {
        self.lora.iter().map(LoraLayer::delta).collect()
    }

    pub fn token_index(&self, name: &str) -> Option<usize> {
        self.token_names.iter().position(|n| n == name)
    }

    pub fn layers(&self) -> usize {
        self.token_embeddings.len()
    }
}

impl ConceptLookup for TaskLearner {
    fn concept_row(&self, name: &str, layer: usize) -> Option<Vec<f64>> {
        let idx = self.token_index(name)?;
        Some(self.token_embeddings[layer].row(idx).to_vec())
    }
}

/// Fresh learner for task `task_id`: seeded down factors, zero up factors
/// (so every delta starts at zero), and concept-token rows copied from the
/// initializer words' vocabulary rows into all layers.
pub fn init_task_learner(
    task_id: usize,
    concepts: &[ConceptSpec],
    rng: &mut Rng,
    cfg: &ModelConfig,
    enc: &TextEncoder,
) -> Result<TaskLearner> {
    if concepts.is_empty() {
        return Err(Error::Config("a task needs at least one concept".into()));
    }
    let mut seen = HashSet::new();
    let mut token_names = Vec::new();
    let mut init_rows = Vec::new();
    for c in concepts {
        c.validate(cfg)?;
        for t in &c.tokens {
            if !seen.insert(t.name.clone()) {
                return Err(Error::Uniqueness(t.name.clone()));
            }
            token_names.push(t.name.clone());
            init_rows.push(enc.word_row(&t.init_word)?);
        }
    }

    let d = cfg.embed_dim;
    let mut lora = Vec::with_capacity(slot_count(cfg.layers));
    for _ in 0..slot_count(cfg.layers) {
        let down = rng.normal_tensor_scaled(&[d, cfg.lora_rank], INIT_STD);
        let up = Tensor::zeros(&[cfg.lora_rank, d]);
        lora.push(LoraLayer::new(down, up)?);
    }

    let mut row_data = Vec::with_capacity(token_names.len() * d);
    for row in &init_rows {
        row_data.extend_from_slice(row);
    }
    let layer_rows = Tensor::from_vec(&[token_names.len(), d], row_data)?;
    let token_embeddings = vec![layer_rows; cfg.layers];

    Ok(TaskLearner { task_id, concepts: concepts.to_vec(), lora, token_embeddings, token_names })
}

/// Metadata block of a learner file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerMeta {
    pub version: u32,
    pub kind: String,
    pub task_id: usize,
    pub config_hash: String,
    pub layers: usize,
    pub token_names: Vec<String>,
    pub concepts: Vec<ConceptSpec>,
}

/// Serializes a learner into the tensor container.
pub fn learner_file(tl: &TaskLearner, config_hash: &str) -> TensorFile {
    let meta = LearnerMeta {
        version: 1,
        kind: "task_learner".into(),
        task_id: tl.task_id,
        config_hash: config_hash.to_string(),
        layers: tl.layers(),
        token_names: tl.token_names.clone(),
        concepts: tl.concepts.clone(),
    };
    let mut file = TensorFile::new(toml::to_string(&meta).expect("meta serializes"));
    for layer in 0..tl.layers() {
        for proj in CROSS_PROJS {
            let slot = crate::toyldm::slot_index(layer, proj);
            file.push(format!("{}.down", slot_name(layer, proj)), tl.lora[slot].down.clone());
            file.push(format!("{}.up", slot_name(layer, proj)), tl.lora[slot].up.clone());
        }
    }
    for (l, rows) in tl.token_embeddings.iter().enumerate() {
        file.push(format!("tokens.layer{l}"), rows.clone());
    }
    file
}

pub fn save_learner(tl: &TaskLearner, path: &Path, config_hash: &str) -> Result<()> {
    learner_file(tl, config_hash).write_to(path)
}

/// Reads a learner back; returns the learner and the config hash recorded
/// at save time.
pub fn load_learner(path: &Path) -> Result<(TaskLearner, String)> {
    let file = TensorFile::read_from(path)?;
    learner_from_file(&file)
}

pub fn learner_from_file(file: &TensorFile) -> Result<(TaskLearner, String)> {
    let meta: LearnerMeta =
        toml::from_str(&file.meta).map_err(|e| Error::Integrity(format!("learner meta: {e}")))?;
    if meta.kind != "task_learner" {
        return Err(Error::Integrity(format!("expected a task_learner file, got {:?}", meta.kind)));
    }
    let mut lora = Vec::with_capacity(slot_count(meta.layers));
    for layer in 0..meta.layers {
        for proj in CROSS_PROJS {
            let down = file.tensor(&format!("{}.down", slot_name(layer, proj)))?.clone();
            let up = file.tensor(&format!("{}.up", slot_name(layer, proj)))?.clone();
            lora.push(LoraLayer::new(down, up).map_err(|e| {
                Error::Integrity(format!("{}: {e}", slot_name(layer, proj)))
            })?);
        }
    }
    let mut token_embeddings = Vec::with_capacity(meta.layers);
    for l in 0..meta.layers {
        let rows = file.tensor(&format!("tokens.layer{l}"))?.clone();
        if rows.rows() != meta.token_names.len() {
            return Err(Error::Integrity(format!(
                "tokens.layer{l} has {} rows, manifest lists {} tokens",
                rows.rows(),
                meta.token_names.len()
            )));
        }
        token_embeddings.push(rows);
    }
    Ok((
        TaskLearner {
            task_id: meta.task_id,
            concepts: meta.concepts,
            lora,
            token_embeddings,
            token_names: meta.token_names,
        },
        meta.config_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyldm::{ConceptTokenSpec, PatternKind};

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 64, ..ModelConfig::default() }
    }

    fn concept(id: &str, tokens: &[(&str, &str)]) -> ConceptSpec {
        ConceptSpec {
            id: id.into(),
            pattern: PatternKind::Blob { center: [3.0, 3.0], radius: 2.0 },
            channels: vec![1.0, 0.0, 0.0, 0.0],
            tokens: tokens
                .iter()
                .map(|(n, w)| ConceptTokenSpec { name: (*n).into(), init_word: (*w).into() })
                .collect(),
        }
    }

    #[test]
    fn fresh_learner_has_zero_deltas() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let tl = init_task_learner(
            1,
            &[concept("v1", &[("<v1>", "thing"), ("<blob1>", "blob")])],
            &mut Rng::new(0),
            &cfg,
            &enc,
        )
        .unwrap();
        for delta in tl.deltas() {
            assert_eq!(delta, Tensor::zeros(&[cfg.embed_dim, cfg.embed_dim]));
        }
    }

    #[test]
    fn same_seed_same_learner() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let c = [concept("v1", &[("<v1>", "thing")])];
        let a = init_task_learner(1, &c, &mut Rng::new(5), &cfg, &enc).unwrap();
        let b = init_task_learner(1, &c, &mut Rng::new(5), &cfg, &enc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_rows_copied_to_every_layer_at_init() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let tl = init_task_learner(
            1,
            &[concept("v1", &[("<v1>", "blob")])],
            &mut Rng::new(0),
            &cfg,
            &enc,
        )
        .unwrap();
        for l in 1..cfg.layers {
            assert_eq!(tl.token_embeddings[l], tl.token_embeddings[0]);
        }
        assert_eq!(tl.token_embeddings[0].row(0), &enc.word_row("blob").unwrap()[..]);
    }

    #[test]
    fn duplicate_tokens_within_a_task_rejected() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let err = init_task_learner(
            1,
            &[concept("v1", &[("<v1>", "thing")]), concept("v2", &[("<v1>", "blob")])],
            &mut Rng::new(0),
            &cfg,
            &enc,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Uniqueness(_)));
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let mut tl = init_task_learner(
            2,
            &[concept("v2", &[("<v2>", "toy")])],
            &mut Rng::new(3),
            &cfg,
            &enc,
        )
        .unwrap();
        // Give the tensors non-trivial values.
        tl.lora[5] = LoraLayer::new(
            Rng::new(8).normal_tensor(&[cfg.embed_dim, cfg.lora_rank]),
            Rng::new(9).normal_tensor(&[cfg.lora_rank, cfg.embed_dim]),
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task2.learner");
        save_learner(&tl, &path, "cfghash").unwrap();
        let (back, hash) = load_learner(&path).unwrap();
        assert_eq!(back, tl);
        assert_eq!(hash, "cfghash");

        // Idempotent: re-serializing the loaded learner is byte-identical.
        let first = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("again.learner");
        save_learner(&back, &path2, "cfghash").unwrap();
        assert_eq!(first, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_learner_file_is_an_integrity_error() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let tl = init_task_learner(
            1,
            &[concept("v1", &[("<v1>", "thing")])],
            &mut Rng::new(0),
            &cfg,
            &enc,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.learner");
        save_learner(&tl, &path, "h").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_learner(&path), Err(Error::Integrity(_))));
    }
}
