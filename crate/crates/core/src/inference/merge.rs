//! Elastic merging of stored low-rank updates.
//!
//! Each layer scores the inference prompt against every task's averaged
//! concept-token embedding, squares and normalizes the scores, and mixes
//! the stored per-task updates under those weights. Every layer computes
//! its own relations; the four projections of a layer share them.

use crate::adapters::LearnerStore;
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::toyldm::{encode_prompt, slot_index, ModelConfig, PromptSpec, TextEncoder, CROSS_PROJS};

/// Relations and normalized weights for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMerge {
    pub relations: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Per-layer relation vectors and the task ids that contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    pub prompt: String,
    pub task_ids: Vec<usize>,
    pub layers: Vec<LayerMerge>,
}

impl MergeReport {
    /// Structured text form, stable across runs.
    pub fn to_text(&self, config_hash: &str, seed: u64) -> String {
        let mut out = String::new();
        out.push_str("merge-report v1\n");
        out.push_str(&format!("config_hash={config_hash}\n"));
        out.push_str(&format!("seed={seed}\n"));
        out.push_str(&format!("prompt={}\n", self.prompt));
        out.push_str(&format!(
            "tasks={}\n",
            self.task_ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
        ));
        for (l, layer) in self.layers.iter().enumerate() {
            let rel =
                layer.relations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            let w = layer.weights.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            out.push_str(&format!("layer{l}.relations={rel}\n"));
            out.push_str(&format!("layer{l}.weights={w}\n"));
        }
        out
    }
}

/// Mean concept-token embedding per task at one layer, `[g, d]`.
pub fn task_embeddings(store: &LearnerStore, layer: usize) -> Result<Tensor> {
    if store.is_empty() {
        return Err(Error::State("no task learners stored".into()));
    }
    let d = store.learners()[0].token_embeddings[layer].cols();
    let mut data = Vec::with_capacity(store.len() * d);
    for learner in store.learners() {
        let rows = &learner.token_embeddings[layer];
        for c in 0..d {
            let mut acc = 0.0;
            for r in 0..rows.rows() {
                acc += rows.at2(r, c);
            }
            data.push(acc / rows.rows() as f64);
        }
    }
    Tensor::from_vec(&[store.len(), d], data)
}

/// Per-task best token-to-task dot product: column maxima of
/// `prompt_rows * task_rows^T`, a `[g]` vector.
pub fn semantic_relation(prompt_rows: &Tensor, task_rows: &Tensor) -> Result<Tensor> {
    if prompt_rows.cols() != task_rows.cols() {
        return Err(Error::Shape(format!(
            "embedding dims disagree: prompt {:?}, tasks {:?}",
            prompt_rows.shape(),
            task_rows.shape()
        )));
    }
    let prod = prompt_rows.matmul(&task_rows.transpose()?)?;
    let g = task_rows.rows();
    let mut best = vec![f64::NEG_INFINITY; g];
    for r in 0..prod.rows() {
        let row = prod.row(r);
        for i in 0..g {
            if row[i] > best[i] {
                best[i] = row[i];
            }
        }
    }
    Tensor::from_vec(&[g], best)
}

/// Squares the relations and divides by the Euclidean norm of the squared
/// vector. An all-zero relation vector maps to the uniform `1/sqrt(g)`
/// weights so unrelated prompts degrade gracefully.
pub fn psi_normalize(relations: &Tensor) -> Tensor {
    let g = relations.len();
    let squared = relations.square();
    let norm = squared.sq_sum().sqrt();
    if norm == 0.0 {
        return Tensor::filled(&[g], 1.0 / (g as f64).sqrt());
    }
    squared.scale(1.0 / norm)
}

/// Merges every stored task's updates for an inference prompt. Returns
/// the per-slot merged deltas and the per-layer report.
pub fn ewa_merge(
    store: &LearnerStore,
    prompt: &PromptSpec,
    enc: &TextEncoder,
    model: &ModelConfig,
) -> Result<(Vec<Tensor>, MergeReport)> {
    if store.is_empty() {
        return Err(Error::State("cannot merge an empty learner store".into()));
    }
    let embedded = encode_prompt(prompt, enc, store)?;
    let task_deltas: Vec<Vec<Tensor>> = store.learners().iter().map(|l| l.deltas()).collect();

    let mut merged = Vec::with_capacity(crate::toyldm::slot_count(model.layers));
    let mut layers = Vec::with_capacity(model.layers);
    for l in 0..model.layers {
        let e_l = task_embeddings(store, l)?;
        let relations = semantic_relation(&embedded.per_layer[l], &e_l)?;
        let weights = psi_normalize(&relations);
        for proj in CROSS_PROJS {
            let slot = slot_index(l, proj);
            let mut acc: Option<Tensor> = None;
            for (i, deltas) in task_deltas.iter().enumerate() {
                let term = deltas[slot].scale(weights.data()[i]);
                acc = Some(match acc {
                    Some(v) => v.add(&term)?,
                    None => term,
                });
            }
            merged.push(acc.expect("store is non-empty"));
        }
        layers.push(LayerMerge {
            relations: relations.data().to_vec(),
            weights: weights.data().to_vec(),
        });
    }

    let report = MergeReport {
        prompt: prompt.display(),
        task_ids: store.learners().iter().map(|l| l.task_id).collect(),
        layers,
    };
    Ok((merged, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_task_learner, LearnerStore};
    use crate::numkit::Rng;
    use crate::toyldm::{ConceptSpec, ConceptTokenSpec, PatternKind};

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 64, ..ModelConfig::default() }
    }

    fn concept(id: &str, token: &str) -> ConceptSpec {
        ConceptSpec {
            id: id.into(),
            pattern: PatternKind::Blob { center: [2.0, 2.0], radius: 1.5 },
            channels: vec![1.0, 0.0, 0.0, 0.0],
            tokens: vec![ConceptTokenSpec { name: token.into(), init_word: "thing".into() }],
        }
    }

    fn store_with(tokens: &[&str], cfg: &ModelConfig, enc: &TextEncoder) -> LearnerStore {
        let mut store = LearnerStore::ephemeral("h");
        for (i, tok) in tokens.iter().enumerate() {
            let mut tl = init_task_learner(
                i + 1,
                &[concept(&format!("c{i}"), tok)],
                &mut Rng::new(i as u64 + 1),
                cfg,
                enc,
            )
            .unwrap();
            // Non-zero up factors so deltas are non-trivial.
            tl.lora.iter_mut().for_each(|l| {
                l.up = Rng::new(90 + i as u64).normal_tensor_scaled(&[cfg.lora_rank, cfg.embed_dim], 0.1)
            });
            store.push(tl).unwrap();
        }
        store
    }

    #[test]
    fn task_embedding_of_single_token_is_the_row() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let store = store_with(&["<v1>"], &cfg, &enc);
        for layer in 0..cfg.layers {
            let e = task_embeddings(&store, layer).unwrap();
            let row = store.learners()[0].token_embeddings[layer].row(0);
            assert_eq!(e.row(0), row);
        }
    }

    #[test]
    fn task_embedding_averages_equal_rows_to_the_row() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let mut store = LearnerStore::ephemeral("h");
        // Two tokens with the same initializer word share their rows.
        let c = ConceptSpec {
            id: "c".into(),
            pattern: PatternKind::Blob { center: [1.0, 1.0], radius: 1.0 },
            channels: vec![1.0, 0.0, 0.0, 0.0],
            tokens: vec![
                ConceptTokenSpec { name: "<a>".into(), init_word: "toy".into() },
                ConceptTokenSpec { name: "<b>".into(), init_word: "toy".into() },
            ],
        };
        store.push(init_task_learner(1, &[c], &mut Rng::new(0), &cfg, &enc).unwrap()).unwrap();
        let e = task_embeddings(&store, 0).unwrap();
        let v = store.learners()[0].token_embeddings[0].row(0);
        for (got, want) in e.row(0).iter().zip(v.iter()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn task_embedding_hand_mean() {
        // Mean of rows (1,0,...) and (0,1,...) is (0.5, 0.5, ...).
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let c = ConceptSpec {
            id: "c".into(),
            pattern: PatternKind::Blob { center: [1.0, 1.0], radius: 1.0 },
            channels: vec![1.0, 0.0, 0.0, 0.0],
            tokens: vec![
                ConceptTokenSpec { name: "<a>".into(), init_word: "toy".into() },
                ConceptTokenSpec { name: "<b>".into(), init_word: "toy".into() },
            ],
        };
        let mut tl = init_task_learner(1, &[c], &mut Rng::new(0), &cfg, &enc).unwrap();
        for rows in tl.token_embeddings.iter_mut() {
            let d = cfg.embed_dim;
            *rows = Tensor::from_fn(&[2, d], |flat| {
                let (r, col) = (flat / d, flat % d);
                if (r == 0 && col == 0) || (r == 1 && col == 1) {
                    1.0
                } else {
                    0.0
                }
            });
        }
        let mut store = LearnerStore::ephemeral("h");
        store.push(tl).unwrap();
        let e = task_embeddings(&store, 0).unwrap();
        assert_eq!(e.at2(0, 0), 0.5);
        assert_eq!(e.at2(0, 1), 0.5);
        assert_eq!(e.at2(0, 2), 0.0);
    }

    #[test]
    fn semantic_relation_is_columnwise_max() {
        let c = Tensor::from_vec(&[2, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let e = Tensor::eye(2);
        let m = semantic_relation(&c, &e).unwrap();
        assert_eq!(m.data(), &[0.9, 0.8]);
    }

    #[test]
    fn semantic_relation_zero_prompt_is_zero() {
        let c = Tensor::zeros(&[3, 4]);
        let e = Tensor::filled(&[2, 4], 1.0);
        assert_eq!(semantic_relation(&c, &e).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn semantic_relation_ignores_duplicate_rows() {
        let c1 = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let c2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e = Tensor::eye(2);
        assert_eq!(
            semantic_relation(&c1, &e).unwrap().data(),
            semantic_relation(&c2, &e).unwrap().data()
        );
    }

    #[test]
    fn psi_single_task_is_one() {
        let m = Tensor::from_vec(&[1], vec![0.37]).unwrap();
        assert_eq!(psi_normalize(&m).data(), &[1.0]);
    }

    #[test]
    fn psi_hand_example() {
        let m = Tensor::from_vec(&[2], vec![1.0, 0.5]).unwrap();
        let p = psi_normalize(&m);
        assert!((p.data()[0] - 0.9701425001453319).abs() < 1e-12);
        assert!((p.data()[1] - 0.24253562503633297).abs() < 1e-12);
    }

    #[test]
    fn psi_equal_relations_are_uniform_and_zero_maps_to_uniform() {
        let m = Tensor::filled(&[4], 0.3);
        let p = psi_normalize(&m);
        for &v in p.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let z = psi_normalize(&Tensor::zeros(&[4]));
        for &v in z.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_is_unit_norm_and_preserves_argmax() {
        let mut rng = Rng::new(12);
        for _ in 0..200 {
            let m = rng.normal_tensor(&[5]);
            let p = psi_normalize(&m);
            let norm = p.sq_sum().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            let argmax_m2 = m
                .square()
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let argmax_p = p
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax_m2, argmax_p);
        }
    }

    #[test]
    fn single_task_merge_returns_stored_delta_bitwise() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let store = store_with(&["<v1>"], &cfg, &enc);
        let prompt = PromptSpec::parse("photo of a <v1>", cfg.prompt_len).unwrap();
        let (merged, report) = ewa_merge(&store, &prompt, &enc, &cfg).unwrap();
        let deltas = store.learners()[0].deltas();
        assert_eq!(merged, deltas);
        for layer in &report.layers {
            assert_eq!(layer.weights, vec![1.0]);
        }
    }

    #[test]
    fn merge_is_linear_in_stored_deltas_for_fixed_weights() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let store = store_with(&["<v1>", "<v2>"], &cfg, &enc);
        let prompt = PromptSpec::parse("photo of a <v1>", cfg.prompt_len).unwrap();
        let (merged, report) = ewa_merge(&store, &prompt, &enc, &cfg).unwrap();

        // Recompute by hand from the report weights.
        for l in 0..cfg.layers {
            let w = &report.layers[l].weights;
            for proj in CROSS_PROJS {
                let slot = slot_index(l, proj);
                let want = store.learners()[0].deltas()[slot]
                    .scale(w[0])
                    .add(&store.learners()[1].deltas()[slot].scale(w[1]))
                    .unwrap();
                assert_eq!(merged[slot], want);
            }
        }
    }

    #[test]
    fn orthogonal_token_embeddings_put_argmax_on_the_prompted_task() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let mut store = LearnerStore::ephemeral("h");
        for i in 0..2 {
            let mut tl = init_task_learner(
                i + 1,
                &[concept(&format!("c{i}"), &format!("<t{i}>"))],
                &mut Rng::new(i as u64),
                &cfg,
                &enc,
            )
            .unwrap();
            // Task i's token rows live on basis axis i: mutually
            // orthogonal across tasks.
            for rows in tl.token_embeddings.iter_mut() {
                *rows = Tensor::from_fn(&[1, cfg.embed_dim], |flat| {
                    if flat == i {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
            store.push(tl).unwrap();
        }
        let prompt = PromptSpec::parse("<t1>", cfg.prompt_len).unwrap();
        let (_, report) = ewa_merge(&store, &prompt, &enc, &cfg).unwrap();
        for layer in &report.layers {
            let argmax = layer
                .weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 1, "weights {:?}", layer.weights);
        }
    }

    #[test]
    fn equal_deltas_equal_relations_merge_to_sqrt2_scale() {
        let cfg = cfg();
        let enc = TextEncoder::new(&cfg);
        let mut store = LearnerStore::ephemeral("h");
        let d_template = Rng::new(44).normal_tensor_scaled(&[cfg.lora_rank, cfg.embed_dim], 0.1);
        for i in 0..2 {
            let mut tl = init_task_learner(
                i + 1,
                &[concept(&format!("c{i}"), &format!("<t{i}>"))],
                &mut Rng::new(5),
                &cfg,
                &enc,
            )
            .unwrap();
            // Identical down factors (same seed) and identical up factors
            // give identical deltas; identical token rows give equal
            // relations.
            tl.lora.iter_mut().for_each(|l| l.up = d_template.clone());
            store.push(tl).unwrap();
        }
        let prompt = PromptSpec::parse("photo of a <t0>", cfg.prompt_len).unwrap();
        let (merged, _) = ewa_merge(&store, &prompt, &enc, &cfg).unwrap();
        let d = store.learners()[0].deltas();
        for (m, base) in merged.iter().zip(d.iter()) {
            let want = base.scale(2.0 / 2f64.sqrt());
            assert!(m.max_abs_diff(&want) < 1e-12);
        }
    }
}
