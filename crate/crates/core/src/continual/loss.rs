//! The consolidation loss: reconstruction + orthogonality + shared
//! subspace residual, with plain evaluators (the test oracles) and the
//! tape builder the trainer differentiates through.

use crate::adapters::{LearnerStore, TaskLearner};
use crate::error::{Error, Result};
use crate::numkit::{GradTape, Rng, Tensor, VarId};
use crate::toyldm::{forward_tape, prompt_layout, Latent, PromptSpec};

use super::subspace::SharedSubspace;
use super::train::{TrainConfig, TrainContext, TrainParams};

/// Subspace-orthogonality penalty: the entrywise absolute sum of every
/// inner-product matrix between a previous task's down factors and the
/// current task's, over tasks and slots. Empty history returns 0.
pub fn r1_orth(prev_down: &[Vec<Tensor>], cur_down: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for (i, task) in prev_down.iter().enumerate() {
        if task.len() != cur_down.len() {
            return Err(Error::Shape(format!(
                "task {} has {} slots, current task has {}",
                i + 1,
                task.len(),
                cur_down.len()
            )));
        }
        for (slot, a_prev) in task.iter().enumerate() {
            total += a_prev.matmul(&cur_down[slot].transpose()?)?.abs().sum();
        }
    }
    Ok(total)
}

/// Shared-subspace residual: `sum_i sum_slots || delta_i - H_i W ||_F^2`
/// over all tasks present in `deltas`.
pub fn r2_shared(deltas: &[Vec<Tensor>], subspace: &SharedSubspace) -> Result<f64> {
    let mut total = 0.0;
    for (task, task_deltas) in deltas.iter().enumerate() {
        for (slot, delta) in task_deltas.iter().enumerate() {
            total += subspace.residual(task, slot, delta)?.sq_sum();
        }
    }
    Ok(total)
}

/// Scalar pieces of one loss evaluation. `r1` and `r2` are the raw
/// regularizer values; `total = diffusion + gamma1 * r1 + gamma2 * r2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub diffusion: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Noising decisions for one batch item, drawn in a fixed order
/// (unconditional flag, then timestep, then noise) so runs are seeded.
pub(crate) struct ItemDraw {
    pub index: usize,
    pub uncond: bool,
    pub t: usize,
    pub eps: Latent,
}

pub(crate) fn draw_items(
    rng: &mut Rng,
    indices: &[usize],
    t_max: usize,
    latent_shape: &[usize],
    uncond_prob: f64,
) -> Vec<ItemDraw> {
    indices
        .iter()
        .map(|&index| {
            let uncond = rng.uniform() < uncond_prob;
            let t = 1 + rng.below(t_max as u64) as usize;
            let eps = Latent::new(rng.normal_tensor(latent_shape)).expect("noise is finite");
            ItemDraw { index, uncond, t, eps }
        })
        .collect()
}

/// Tape handles for the trainable tensors.
pub(crate) struct ParamVars {
    pub downs: Vec<VarId>,
    pub ups: Vec<VarId>,
    pub tokens: Vec<VarId>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<VarId> {
        let mut v = self.downs.clone();
        v.extend_from_slice(&self.ups);
        v.extend_from_slice(&self.tokens);
        v
    }
}

/// Frozen context for the regularizer terms.
pub(crate) struct RegTerms<'a> {
    pub prev_downs: &'a [Vec<Tensor>],
    pub prev_deltas: &'a [Vec<Tensor>],
    pub subspace: &'a SharedSubspace,
    pub gamma1: f64,
    pub gamma2: f64,
}

pub(crate) struct StepGraph {
    pub tape: GradTape,
    pub vars: ParamVars,
    pub loss: VarId,
    pub breakdown: LossBreakdown,
}

/// Builds the per-batch loss graph: the mean per-item reconstruction term
/// plus, when regularization context is given, the weighted regularizers.
/// Zero-weighted regularizers are skipped entirely, so a run with both
/// gammas at zero is structurally the plain reconstruction objective.
pub(crate) fn build_step_graph(
    params: &TrainParams,
    data: &[(Latent, PromptSpec)],
    draws: &[ItemDraw],
    reg: Option<&RegTerms>,
    ctx: &TrainContext,
) -> Result<StepGraph> {
    if draws.is_empty() {
        return Err(Error::Contract("a training step needs at least one batch item".into()));
    }
    let mut tape = GradTape::new();
    let vars = ParamVars {
        downs: params.downs.iter().map(|t| tape.leaf(t.clone())).collect(),
        ups: params.ups.iter().map(|t| tape.leaf(t.clone())).collect(),
        tokens: params.tokens.iter().map(|t| tape.leaf(t.clone())).collect(),
    };
    let delta_ids: Vec<VarId> = vars
        .downs
        .iter()
        .zip(vars.ups.iter())
        .map(|(&d, &u)| tape.matmul(d, u))
        .collect::<Result<_>>()?;

    // Reconstruction term, averaged over the batch.
    let mut recon_sum: Option<VarId> = None;
    for draw in draws {
        let (z0, prompt) = &data[draw.index];
        let z_t = ctx.sched.add_noise(z0, &draw.eps, draw.t)?;

        let cond_ids = if draw.uncond {
            None
        } else {
            let (base, concept_positions) = prompt_layout(prompt, ctx.enc)?;
            let mut rows = Vec::with_capacity(concept_positions.len());
            let mut positions = Vec::with_capacity(concept_positions.len());
            for (pos, name) in &concept_positions {
                let idx = params
                    .token_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Vocabulary(name.clone()))?;
                rows.push(idx);
                positions.push(*pos);
            }
            let mut per_layer = Vec::with_capacity(ctx.model.layers);
            for l in 0..ctx.model.layers {
                let base_id = tape.leaf(base.clone());
                let cond_l = if rows.is_empty() {
                    base_id
                } else {
                    let gathered = tape.gather_rows(vars.tokens[l], &rows)?;
                    let scattered =
                        tape.scatter_rows(gathered, &positions, ctx.model.prompt_len)?;
                    tape.add(base_id, scattered)?
                };
                per_layer.push(cond_l);
            }
            Some(per_layer)
        };

        let pred = forward_tape(
            &mut tape,
            &z_t,
            draw.t,
            cond_ids.as_deref(),
            ctx.weights,
            Some(&delta_ids),
            ctx.model,
        )?;
        let target = tape.leaf(draw.eps.as_matrix());
        let diff = tape.sub(target, pred)?;
        let sq = tape.square(diff);
        let term = tape.mean(sq);
        recon_sum = Some(match recon_sum {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let diffusion = tape.scale(recon_sum.expect("non-empty batch"), 1.0 / draws.len() as f64);

    let mut loss = diffusion;
    let mut r1_value = 0.0;
    let mut r2_value = 0.0;
    if let Some(reg) = reg {
        if reg.gamma1 != 0.0 && !reg.prev_downs.is_empty() {
            let transposed: Vec<VarId> = vars
                .downs
                .iter()
                .map(|&d| tape.transpose(d))
                .collect::<Result<_>>()?;
            let mut acc: Option<VarId> = None;
            for task in reg.prev_downs {
                for (slot, a_prev) in task.iter().enumerate() {
                    let prev_id = tape.leaf(a_prev.clone());
                    let prod = tape.matmul(prev_id, transposed[slot])?;
                    let a = tape.abs(prod);
                    let s = tape.sum(a);
                    acc = Some(match acc {
                        Some(v) => tape.add(v, s)?,
                        None => s,
                    });
                }
            }
            let r1 = acc.expect("non-empty history");
            r1_value = tape.value(r1).data()[0];
            let weighted = tape.scale(r1, reg.gamma1);
            loss = tape.add(loss, weighted)?;
        }
        if reg.gamma2 != 0.0 {
            // Previous tasks' residuals are constant in step 1; only the
            // current task's term needs gradients.
            let const_part = r2_shared(reg.prev_deltas, reg.subspace)?;
            let cur_task = reg.prev_deltas.len();
            let mut acc = tape.leaf(Tensor::scalar(const_part));
            for (slot, &delta) in delta_ids.iter().enumerate() {
                let hw = reg.subspace.proj[cur_task][slot]
                    .matmul(&reg.subspace.common[slot])?;
                let hw_id = tape.leaf(hw);
                let resid = tape.sub(delta, hw_id)?;
                let sq = tape.square(resid);
                let s = tape.sum(sq);
                acc = tape.add(acc, s)?;
            }
            r2_value = tape.value(acc).data()[0];
            let weighted = tape.scale(acc, reg.gamma2);
            loss = tape.add(loss, weighted)?;
        }
    }

    let breakdown = LossBreakdown {
        total: tape.value(loss).data()[0],
        diffusion: tape.value(diffusion).data()[0],
        r1: r1_value,
        r2: r2_value,
    };
    Ok(StepGraph { tape, vars, loss, breakdown })
}

/// Full consolidation loss for one batch of the current task. Only valid
/// from the second task onward; the first task trains on the plain
/// reconstruction objective.
pub fn ccl_loss(
    batch: &[(Latent, PromptSpec)],
    learner: &TaskLearner,
    prev: &LearnerStore,
    subspace: &SharedSubspace,
    cfg: &TrainConfig,
    ctx: &TrainContext,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    if prev.is_empty() || learner.task_id < 2 {
        return Err(Error::Contract(
            "consolidation loss applies from the second task on; train the first task on the plain reconstruction objective".into(),
        ));
    }
    let params = TrainParams::from_learner(learner);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let draws = draw_items(
        rng,
        &indices,
        ctx.sched.len(),
        &ctx.model.latent_shape(),
        cfg.uncond_prob,
    );
    let prev_downs: Vec<Vec<Tensor>> = prev
        .learners()
        .iter()
        .map(|l| l.lora.iter().map(|x| x.down.clone()).collect())
        .collect();
    let mut prev_deltas: Vec<Vec<Tensor>> =
        prev.learners().iter().map(|l| l.deltas()).collect();
    // R2 runs over tasks 1..=g; the current task's entry is appended and
    // handled inside the graph.
    prev_deltas.truncate(prev.len());
    let reg = RegTerms {
        prev_downs: &prev_downs,
        prev_deltas: &prev_deltas,
        subspace,
        gamma1: cfg.gamma1,
        gamma2: cfg.gamma2,
    };
    let graph = build_step_graph(&params, batch, &draws, Some(&reg), ctx)?;
    Ok(graph.breakdown)
}
