//! Scratch probe: trains a couple of tasks at the default configuration
//! and prints recovery errors. Not part of the deliverable.

use std::time::Instant;

use incdiff::adapters::LearnerStore;
use incdiff::continual::{learn_task, BaselineState, SharedSubspace, TrainConfig};
use incdiff::inference::{sample, GuidanceConfig};
use incdiff::numkit::Rng;
use incdiff::toyldm::{
    forward, gen_concept_dataset, BaseStack, ConceptSpec, ConceptTokenSpec, ModelConfig,
    PatternKind, PromptSpec,
};

fn concept(id: &str, center: [f64; 2], ch: usize, tok: &str, word: &str) -> ConceptSpec {
    let mut channels = vec![0.0; 4];
    channels[ch] = 1.0;
    ConceptSpec {
        id: id.into(),
        pattern: PatternKind::Blob { center, radius: 2.0 },
        channels,
        tokens: vec![ConceptTokenSpec { name: tok.into(), init_word: word.into() }],
    }
}

fn main() {
    let model = ModelConfig::default();
    let stack = BaseStack::init(model.clone()).unwrap();
    let view = stack.view();
    let tcfg = TrainConfig::default();

    let concepts = vec![
        concept("v1", [2.0, 2.0], 0, "<v1>", "blob"),
        concept("v2", [5.0, 5.0], 1, "<v2>", "toy"),
        concept("v3", [2.0, 5.0], 2, "<v3>", "pattern"),
    ];

    let mut store = LearnerStore::ephemeral("probe");
    let mut subspace = SharedSubspace::empty();
    let mut baseline = BaselineState::new();

    for (i, c) in concepts.iter().enumerate() {
        let task_id = i + 1;
        let mut data_rng = Rng::new(model.seed).derive(0xda7a + task_id as u64);
        let data = gen_concept_dataset(c, 4, &mut data_rng, &model).unwrap();

        let t0 = Instant::now();
        let outcome =
            learn_task(task_id, &[c.clone()], &data, &store, &mut subspace, &tcfg, &view).unwrap();
        let first = &outcome.records[0];
        let last = outcome.records.last().unwrap();
        println!(
            "task {task_id}: {:.1?}  loss {:.4} -> {:.4}  r1 {:.4} -> {:.4}  r2 {:.4} -> {:.4}",
            t0.elapsed(),
            first.loss,
            last.loss,
            first.r1,
            last.r1,
            first.r2,
            last.r2
        );
        for r in outcome.records.iter().step_by(100) {
            println!("    step {:3}  loss {:.4} diff {:.4}", r.step, r.loss, r.diffusion);
        }
        store.push(outcome.learner).unwrap();

        let t0 = Instant::now();
        baseline.train_task(task_id, &[c.clone()], &data, &tcfg, &view).unwrap();
        println!("  baseline task {task_id}: {:.1?}", t0.elapsed());
    }

    // Recovery errors after the full sequence.
    let gcfg = GuidanceConfig { alpha: 1.0, ..GuidanceConfig::default() };
    for (i, c) in concepts.iter().enumerate() {
        let prompt = c.prompt(&model).unwrap();

        let t0 = Instant::now();
        let out = sample(&prompt, &[], &store, &gcfg, &view).unwrap();
        let bl = sample_baseline(&prompt, &baseline, &gcfg, &view);
        let plain = PromptSpec::parse("photo of a thing", model.prompt_len).unwrap();
        let un = sample(&plain, &[], &store, &gcfg, &view).unwrap();

        let row = |latent: &incdiff::toyldm::Latent| -> String {
            concepts
                .iter()
                .map(|cc| {
                    format!("{:8.4}", latent.tensor().mse(cc.canonical_pattern(&model).tensor()).unwrap())
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!(
            "prompt {} ({:.1?}):\n  method    [{}] var {:.3}\n  baseline  [{}] var {:.3}\n  untrained [{}] var {:.3}",
            i + 1,
            t0.elapsed(),
            row(&out.latent),
            out.latent.tensor().sq_sum() / 256.0,
            row(&bl),
            bl.tensor().sq_sum() / 256.0,
            row(&un.latent),
            un.latent.tensor().sq_sum() / 256.0,
        );
        let w = &out.report.layers[0].weights;
        println!("  psi(layer0) {:?}", w.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
}

fn sample_baseline(
    prompt: &PromptSpec,
    baseline: &BaselineState,
    gcfg: &GuidanceConfig,
    view: &incdiff::toyldm::StackView,
) -> incdiff::toyldm::Latent {
    use incdiff::inference::{aggregate_noise, guide};
    use incdiff::toyldm::{encode_prompt, Latent};

    let deltas = baseline.deltas();
    let rows = encode_prompt(prompt, view.enc, baseline).unwrap();
    let mut rng = Rng::new(gcfg.seed).derive(0x5a11);
    let mut z = Latent::new(rng.normal_tensor(&view.model.latent_shape())).unwrap();
    let t_total = view.sched.len();
    for t in (1..=t_total).rev() {
        let uncond = forward(&z, t, None, view.weights, Some(&deltas), view.model, None).unwrap();
        let cond =
            forward(&z, t, Some(&rows), view.weights, Some(&deltas), view.model, None).unwrap();
        let e = guide(&uncond, &cond, gcfg.scale).unwrap();
        let e = aggregate_noise(&e, &[], 1.0).unwrap();
        let t_prev = t - 1;
        let abar_t = view.sched.alpha_bar(t);
        let abar_prev = view.sched.alpha_bar(t_prev);
        let z0_hat = z
            .tensor()
            .sub(&e.tensor().scale((1.0 - abar_t).sqrt()))
            .unwrap()
            .scale(1.0 / abar_t.sqrt());
        let var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev);
        let dir = (1.0 - abar_prev - var).max(0.0).sqrt();
        let mut next = z0_hat.scale(abar_prev.sqrt()).add(&e.tensor().scale(dir)).unwrap();
        if t_prev > 0 {
            let xi = rng.normal_tensor(&view.model.latent_shape());
            next = next.add(&xi.scale(var.sqrt())).unwrap();
        }
        z = Latent::new(next).unwrap();
    }
    z
}
