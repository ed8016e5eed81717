//! Guided region noise estimation, aggregation and the sampling loop.

use serde::{Deserialize, Serialize};

use crate::adapters::LearnerStore;
use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};
use crate::toyldm::{
    encode_prompt, forward, slot_index, CrossProj, Latent, NoiseSchedule, PromptEmbedding,
    PromptSpec, StackView,
};

use super::merge::{ewa_merge, MergeReport};
use super::region::{apply_regions, regional_cross_attention, AttentionKind, RegionCondition};

const SAMPLER_STREAM: u64 = 0x5a11;

/// Guidance and sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Classifier-free guidance scale.
    pub scale: f64,
    /// Balance weight between the global estimate and the masked region
    /// estimates.
    pub alpha: f64,
    /// Denoising step count; clamped to the schedule length.
    pub sample_steps: usize,
    pub seed: u64,
    /// Normalization used inside regional cross-attention.
    pub attention: AttentionKind,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 7.5,
            alpha: 0.1,
            sample_steps: 100,
            seed: 0,
            attention: AttentionKind::Sigmoid,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Classifier-free guidance: `uncond + s * (cond - uncond)`. A zero scale
/// returns the unconditional estimate bitwise.
pub fn guide(uncond: &Latent, cond: &Latent, scale: f64) -> Result<Latent> {
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let diff = cond.tensor().sub(uncond.tensor())?;
    Latent::new(uncond.tensor().add(&diff.scale(scale))?)
}

/// Masked aggregation of region estimates:
/// `alpha * global + sum_u (1 - alpha) * estimate_u (x) mask_u`.
/// The zero-weighted sum is skipped when `alpha == 1` so that case stays
/// bitwise equal to the global estimate.
pub fn aggregate_noise(
    global: &Latent,
    region_estimates: &[(Latent, Tensor)],
    alpha: f64,
) -> Result<Latent> {
    let shape = global.tensor().shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = global.tensor().scale(alpha);
    if alpha != 1.0 {
        for (estimate, mask) in region_estimates {
            if estimate.tensor().shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "region estimate shape {:?} differs from {:?}",
                    estimate.tensor().shape(),
                    shape
                )));
            }
            if mask.shape() != [h, w] {
                return Err(Error::Shape(format!(
                    "mask shape {:?} does not match the {h}x{w} grid",
                    mask.shape()
                )));
            }
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config("region masks must be binary".into()));
            }
            let weight = 1.0 - alpha;
            let e = estimate.tensor();
            let data = out.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let m = mask.at2(y, x);
                    if m == 0.0 {
                        continue;
                    }
                    let base = (y * w + x) * c;
                    for ch in 0..c {
                        data[base + ch] += weight * e.data()[base + ch];
                    }
                }
            }
        }
    }
    Latent::new(out)
}

/// Effective regional-attention projections of the merged model, per
/// layer: base cross-attention query/key/value plus the merged deltas.
fn regional_projections(view: &StackView, merged: &[Tensor]) -> Result<Vec<[Tensor; 3]>> {
    let mut out = Vec::with_capacity(view.model.layers);
    for l in 0..view.model.layers {
        let q = view.weights.cross(l, CrossProj::Query).add(&merged[slot_index(l, CrossProj::Query)])?;
        let k = view.weights.cross(l, CrossProj::Key).add(&merged[slot_index(l, CrossProj::Key)])?;
        let v = view.weights.cross(l, CrossProj::Value).add(&merged[slot_index(l, CrossProj::Value)])?;
        out.push([q, k, v]);
    }
    Ok(out)
}

/// Denoiser pass with the regional hook active: after every layer, the
/// box interior of the feature map is replaced by that layer's regional
/// cross-attention output.
fn region_conditional_forward(
    z_t: &Latent,
    t: usize,
    region_rows: &PromptEmbedding,
    region: &RegionCondition,
    merged: &[Tensor],
    projections: &[[Tensor; 3]],
    kind: AttentionKind,
    view: &StackView,
) -> Result<Latent> {
    let (h, w, d) = (view.model.grid_h, view.model.grid_w, view.model.embed_dim);
    let hook = move |layer: usize, x: Tensor| -> Result<Tensor> {
        let f_map = x.reshaped(&[h, w, d])?;
        let [wq, wk, wv] = &projections[layer];
        let feature = regional_cross_attention(
            &f_map,
            &region_rows.per_layer[layer],
            &region.bbox,
            wq,
            wk,
            wv,
            kind,
        )?;
        apply_regions(&f_map, &[(feature, region.bbox)])?.reshaped(&[h * w, d])
    };
    forward(z_t, t, Some(region_rows), view.weights, Some(merged), view.model, Some(&hook))
}

/// Guided noise estimate for one region condition: the unconditional
/// estimate plus `scale` times the gap to the region-conditioned one.
pub fn region_noise_estimate(
    z_t: &Latent,
    t: usize,
    region: &RegionCondition,
    store: &LearnerStore,
    merged: &[Tensor],
    scale: f64,
    kind: AttentionKind,
    view: &StackView,
) -> Result<Latent> {
    let uncond = forward(z_t, t, None, view.weights, Some(merged), view.model, None)?;
    region_noise_estimate_with(&uncond, z_t, t, region, store, merged, scale, kind, view)
}

#[allow(clippy::too_many_arguments)]
fn region_noise_estimate_with(
    uncond: &Latent,
    z_t: &Latent,
    t: usize,
    region: &RegionCondition,
    store: &LearnerStore,
    merged: &[Tensor],
    scale: f64,
    kind: AttentionKind,
    view: &StackView,
) -> Result<Latent> {
    let rows = encode_prompt(&region.prompt, view.enc, store)?;
    let projections = regional_projections(view, merged)?;
    let cond =
        region_conditional_forward(z_t, t, &rows, region, merged, &projections, kind, view)?;
    guide(uncond, &cond, scale)
}

/// Predicted clean latents are clamped to this range: the synthetic
/// patterns live in [-1, 1], and the clamp keeps the guidance-amplified
/// feedback loop from diverging.
const Z0_CLAMP: f64 = 2.0;

/// One ancestral denoising step from `t` to `t_prev` given the noise
/// estimate. `noise` is ignored on the final step (`t_prev == 0`), where
/// the posterior mean is exact.
fn posterior_step(
    z: &Latent,
    estimate: &Latent,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Latent> {
    let abar_t = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t_prev);
    let mut z0_hat = z
        .tensor()
        .sub(&estimate.tensor().scale((1.0 - abar_t).sqrt()))?
        .scale(1.0 / abar_t.sqrt());
    if t_prev > 0 {
        // Intermediate steps only, so the final-step mean stays the exact
        // closed form.
        z0_hat = z0_hat.map(|v| v.clamp(-Z0_CLAMP, Z0_CLAMP));
    }
    let var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev);
    let dir_coef = (1.0 - abar_prev - var).max(0.0).sqrt();
    let mut next = z0_hat.scale(abar_prev.sqrt()).add(&estimate.tensor().scale(dir_coef))?;
    if t_prev > 0 {
        let xi = noise.ok_or_else(|| Error::State("missing sampler noise".into()))?;
        next = next.add(&xi.scale(var.sqrt()))?;
    }
    Latent::new(next)
}

/// Descending timestep sequence for the requested step count.
fn timestep_sequence(t_total: usize, requested: usize) -> Vec<usize> {
    let steps = requested.min(t_total);
    if steps >= t_total {
        return (1..=t_total).rev().collect();
    }
    if steps == 1 {
        return vec![t_total];
    }
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = t_total as f64 - i as f64 * (t_total as f64 - 1.0) / (steps as f64 - 1.0);
        let t = t.round() as usize;
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

pub struct SampleOutput {
    pub latent: Latent,
    pub report: MergeReport,
    pub notes: Vec<String>,
}

/// Full sampling loop: merge once, then iterate from seeded noise,
/// aggregating the global guided estimate with every region's masked
/// estimate at each timestep.
pub fn sample(
    prompt: &PromptSpec,
    regions: &[RegionCondition],
    store: &LearnerStore,
    gcfg: &GuidanceConfig,
    view: &StackView,
) -> Result<SampleOutput> {
    gcfg.validate()?;
    if store.is_empty() {
        return Err(Error::State("cannot sample from an empty learner store".into()));
    }
    let (merged, report) = ewa_merge(store, prompt, view.enc, view.model)?;
    let full_rows = encode_prompt(prompt, view.enc, store)?;
    let projections = regional_projections(view, &merged)?;
    let (h, w) = (view.model.grid_h, view.model.grid_w);

    let mut region_rows = Vec::with_capacity(regions.len());
    let mut masks = Vec::with_capacity(regions.len());
    for r in regions {
        r.bbox.validate(h, w)?;
        region_rows.push(encode_prompt(&r.prompt, view.enc, store)?);
        masks.push(r.bbox.mask(h, w));
    }

    let mut notes = Vec::new();
    if !regions.is_empty() {
        notes.push(format!("regional_attention={}", gcfg.attention));
    }
    if gcfg.alpha != 1.0 {
        let mut covered = 0usize;
        for y in 0..h {
            for x in 0..w {
                if masks.iter().any(|m| m.at2(y, x) == 1.0) {
                    covered += 1;
                }
            }
        }
        if covered < h * w {
            notes.push(format!(
                "eq5-coverage={covered}/{} uncovered pixels keep only alpha-weighted noise",
                h * w
            ));
        }
    }

    let mut rng = Rng::new(gcfg.seed).derive(SAMPLER_STREAM);
    let mut z = Latent::new(rng.normal_tensor(&view.model.latent_shape()))?;
    let ts = timestep_sequence(view.sched.len(), gcfg.sample_steps);

    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);

        let uncond = forward(&z, t, None, view.weights, Some(&merged), view.model, None)?;
        let cond = forward(&z, t, Some(&full_rows), view.weights, Some(&merged), view.model, None)?;
        let global = guide(&uncond, &cond, gcfg.scale)?;

        let mut estimates = Vec::with_capacity(regions.len());
        for (u, region) in regions.iter().enumerate() {
            let cond_u = region_conditional_forward(
                &z,
                t,
                &region_rows[u],
                region,
                &merged,
                &projections,
                gcfg.attention,
                view,
            )?;
            let e_u = guide(&uncond, &cond_u, gcfg.scale)?;
            estimates.push((e_u, masks[u].clone()));
        }
        let aggregated = aggregate_noise(&global, &estimates, gcfg.alpha)?;

        let noise =
            if t_prev > 0 { Some(rng.normal_tensor(&view.model.latent_shape())) } else { None };
        z = posterior_step(&z, &aggregated, t, t_prev, view.sched, noise.as_ref())?;
    }

    Ok(SampleOutput { latent: z, report, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_task_learner;
    use crate::toyldm::{BaseStack, ConceptSpec, ConceptTokenSpec, ModelConfig, PatternKind};

    fn stack() -> BaseStack {
        BaseStack::init(ModelConfig { vocab_size: 64, timesteps: 10, ..ModelConfig::default() })
            .unwrap()
    }

    fn seeded_store(stack: &BaseStack) -> LearnerStore {
        let mut store = LearnerStore::ephemeral("h");
        let c = ConceptSpec {
            id: "v1".into(),
            pattern: PatternKind::Blob { center: [3.0, 3.0], radius: 2.0 },
            channels: vec![1.0, 0.0, 0.0, 0.0],
            tokens: vec![ConceptTokenSpec { name: "<v1>".into(), init_word: "blob".into() }],
        };
        let mut tl =
            init_task_learner(1, &[c], &mut Rng::new(1), &stack.model, &stack.enc).unwrap();
        tl.lora.iter_mut().for_each(|l| {
            l.up = Rng::new(2).normal_tensor_scaled(&[stack.model.lora_rank, stack.model.embed_dim], 0.05)
        });
        store.push(tl).unwrap();
        store
    }

    fn latent(stack: &BaseStack, seed: u64) -> Latent {
        Latent::new(Rng::new(seed).normal_tensor(&stack.model.latent_shape())).unwrap()
    }

    fn region(stack: &BaseStack) -> RegionCondition {
        RegionCondition {
            prompt: PromptSpec::parse("<v1>", stack.model.prompt_len).unwrap(),
            bbox: crate::inference::BoundingBox { top: 2, left: 2, height: 4, width: 4 },
        }
    }

    #[test]
    fn zero_scale_returns_unconditional_bitwise() {
        let stack = stack();
        let store = seeded_store(&stack);
        let (merged, _) = ewa_merge(
            &store,
            &PromptSpec::parse("<v1>", stack.model.prompt_len).unwrap(),
            &stack.enc,
            &stack.model,
        )
        .unwrap();
        let z = latent(&stack, 3);
        let view = stack.view();
        let uncond = forward(&z, 5, None, view.weights, Some(&merged), view.model, None).unwrap();
        let e = region_noise_estimate(
            &z,
            5,
            &region(&stack),
            &store,
            &merged,
            0.0,
            AttentionKind::Sigmoid,
            &view,
        )
        .unwrap();
        assert_eq!(e, uncond);
    }

    #[test]
    fn equal_branches_collapse_for_any_scale() {
        let stack = stack();
        let z = latent(&stack, 4);
        let e = guide(&z, &z, 7.5).unwrap();
        assert!(e.tensor().max_abs_diff(z.tensor()) < 1e-15);
    }

    #[test]
    fn region_estimate_matches_direct_re_evaluation() {
        let stack = stack();
        let store = seeded_store(&stack);
        let view = stack.view();
        let prompt = PromptSpec::parse("photo of a <v1>", stack.model.prompt_len).unwrap();
        let (merged, _) = ewa_merge(&store, &prompt, &stack.enc, &stack.model).unwrap();
        let z = latent(&stack, 5);
        let r = region(&stack);
        let s = 7.5;

        let got = region_noise_estimate(
            &z,
            4,
            &r,
            &store,
            &merged,
            s,
            AttentionKind::Sigmoid,
            &view,
        )
        .unwrap();

        // Direct re-evaluation of the guidance formula.
        let uncond = forward(&z, 4, None, view.weights, Some(&merged), view.model, None).unwrap();
        let rows = encode_prompt(&r.prompt, &stack.enc, &store).unwrap();
        let projections = regional_projections(&view, &merged).unwrap();
        let cond = region_conditional_forward(
            &z,
            4,
            &rows,
            &r,
            &merged,
            &projections,
            AttentionKind::Sigmoid,
            &view,
        )
        .unwrap();
        let want = Tensor::from_fn(got.tensor().shape(), |i| {
            uncond.tensor().data()[i] + s * (cond.tensor().data()[i] - uncond.tensor().data()[i])
        });
        assert!(got.tensor().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn aggregation_algebra() {
        let stack = stack();
        let global = latent(&stack, 6);
        let e1 = latent(&stack, 7);
        let full = crate::inference::BoundingBox {
            top: 0,
            left: 0,
            height: stack.model.grid_h,
            width: stack.model.grid_w,
        }
        .mask(stack.model.grid_h, stack.model.grid_w);

        // alpha = 1 collapses to the global estimate bitwise.
        let a1 = aggregate_noise(&global, &[(e1.clone(), full.clone())], 1.0).unwrap();
        assert_eq!(a1, global);

        // No regions: literally alpha * global.
        let a2 = aggregate_noise(&global, &[], 0.25).unwrap();
        assert_eq!(a2.tensor(), &global.tensor().scale(0.25));

        // alpha = 0 with one full-grid mask returns that estimate.
        let a3 = aggregate_noise(&global, &[(e1.clone(), full)], 0.0).unwrap();
        assert!(a3.tensor().max_abs_diff(e1.tensor()) < 1e-15);
    }

    #[test]
    fn aggregation_matches_direct_formula_on_random_tensors() {
        let stack = stack();
        let (h, w) = (stack.model.grid_h, stack.model.grid_w);
        let global = latent(&stack, 8);
        let e1 = latent(&stack, 9);
        let e2 = latent(&stack, 10);
        let m1 = crate::inference::BoundingBox { top: 0, left: 0, height: 3, width: 3 }.mask(h, w);
        let m2 = crate::inference::BoundingBox { top: 4, left: 2, height: 2, width: 5 }.mask(h, w);
        let alpha = 0.1;
        let got =
            aggregate_noise(&global, &[(e1.clone(), m1.clone()), (e2.clone(), m2.clone())], alpha)
                .unwrap();
        let c = stack.model.latent_channels;
        let want = Tensor::from_fn(global.tensor().shape(), |i| {
            let pix = i / c;
            let (y, x) = (pix / w, pix % w);
            alpha * global.tensor().data()[i]
                + (1.0 - alpha) * e1.tensor().data()[i] * m1.at2(y, x)
                + (1.0 - alpha) * e2.tensor().data()[i] * m2.at2(y, x)
        });
        assert!(got.tensor().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_alpha_one_drops_regions() {
        let stack = stack();
        let store = seeded_store(&stack);
        let view = stack.view();
        let prompt = PromptSpec::parse("photo of a <v1>", stack.model.prompt_len).unwrap();
        let gcfg = GuidanceConfig { sample_steps: 10, alpha: 1.0, ..GuidanceConfig::default() };

        let a = sample(&prompt, &[], &store, &gcfg, &view).unwrap();
        let b = sample(&prompt, &[], &store, &gcfg, &view).unwrap();
        assert_eq!(a.latent, b.latent);

        // With alpha = 1 the region estimates carry zero weight.
        let c = sample(&prompt, &[region(&stack)], &store, &gcfg, &view).unwrap();
        assert_eq!(a.latent, c.latent);
    }

    #[test]
    fn posterior_mean_at_final_step_recovers_z0() {
        let stack = stack();
        let z0 = latent(&stack, 11);
        let eps = latent(&stack, 12);
        let z1 = stack.sched.add_noise(&z0, &eps, 1).unwrap();
        let back = posterior_step(&z1, &eps, 1, 0, &stack.sched, None).unwrap();
        assert!(back.tensor().max_abs_diff(z0.tensor()) < 1e-12);
    }

    #[test]
    fn timestep_sequences() {
        assert_eq!(timestep_sequence(5, 10), vec![5, 4, 3, 2, 1]);
        assert_eq!(timestep_sequence(5, 5), vec![5, 4, 3, 2, 1]);
        let strided = timestep_sequence(100, 10);
        assert_eq!(strided.first(), Some(&100));
        assert_eq!(strided.last(), Some(&1));
        assert!(strided.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timestep_sequence(100, 1), vec![100]);
    }

    #[test]
    fn empty_store_cannot_sample() {
        let stack = stack();
        let store = LearnerStore::ephemeral("h");
        let prompt = PromptSpec::parse("photo", stack.model.prompt_len).unwrap();
        assert!(sample(&prompt, &[], &store, &GuidanceConfig::default(), &stack.view()).is_err());
    }
}
