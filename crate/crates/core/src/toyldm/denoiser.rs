//! The toy denoiser: a bias-free transformer over spatial latent tokens.
//!
//! The grid is flattened to `h*w` tokens; each layer applies
//! self-attention, cross-attention to that layer's text rows, and a SiLU
//! MLP, all with residual connections. Sinusoidal position features and a
//! projected sinusoidal time embedding are added once before layer 1.
//! With no conditioning, cross-attention reads a single frozen null-token
//! row. Low-rank deltas, when given, are added to the cross-attention
//! projections.
//!
//! There are two evaluation paths: [`forward`] on plain tensors and
//! [`forward_tape`] on a gradient tape. Both call the same tensor kernels
//! in the same order, so their outputs agree bitwise.

use crate::error::{Error, Result};
use crate::numkit::{GradTape, Rng, Tensor, VarId};

use super::{Latent, ModelConfig, PromptEmbedding};

const DENOISER_STREAM: u64 = 0x6d6f;

/// Cross-attention projections that receive low-rank adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossProj {
    Query,
    Key,
    Value,
    Output,
}

pub const CROSS_PROJS: [CrossProj; 4] =
    [CrossProj::Query, CrossProj::Key, CrossProj::Value, CrossProj::Output];

impl CrossProj {
    pub fn tag(self) -> &'static str {
        match self {
            CrossProj::Query => "q",
            CrossProj::Key => "k",
            CrossProj::Value => "v",
            CrossProj::Output => "o",
        }
    }
}

/// Flat index of an adapted projection: layer-major, `[q, k, v, o]` order.
pub fn slot_index(layer: usize, proj: CrossProj) -> usize {
    layer * CROSS_PROJS.len()
        + match proj {
            CrossProj::Query => 0,
            CrossProj::Key => 1,
            CrossProj::Value => 2,
            CrossProj::Output => 3,
        }
}

/// Number of adapted projections for a layer count.
pub fn slot_count(layers: usize) -> usize {
    layers * CROSS_PROJS.len()
}

pub fn slot_name(layer: usize, proj: CrossProj) -> String {
    format!("layer{layer}.cross_{}", proj.tag())
}

pub struct LayerWeights {
    pub self_q: Tensor,
    pub self_k: Tensor,
    pub self_v: Tensor,
    pub self_o: Tensor,
    pub cross_q: Tensor,
    pub cross_k: Tensor,
    pub cross_v: Tensor,
    pub cross_o: Tensor,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

/// Frozen base weights. Immutable after [`DenoiserWeights::init`]; the
/// position encoding is derived (not a stored weight).
pub struct DenoiserWeights {
    pub input_proj: Tensor,
    pub output_proj: Tensor,
    pub time_proj: Tensor,
    pub null_token: Tensor,
    pub layers: Vec<LayerWeights>,
    pos: Tensor,
}

impl DenoiserWeights {
    /// Seeded initialization; draw order is fixed so a seed pins every
    /// weight. The frozen self-attention and MLP branch outputs are
    /// shrunk by the sublayer count so the stream magnitude stays near
    /// its input scale through the depth; cross-attention keeps full
    /// gain because it carries all of the trainable conditioning and its
    /// values come from the text rows, not the stream.
    pub fn init(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mut rng = Rng::new(cfg.seed).derive(DENOISER_STREAM);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let branch = inv_sqrt_d / (2.0 * cfg.layers as f64);
        let branch_mlp = 1.0 / ((cfg.mlp_hidden as f64).sqrt() * 2.0 * cfg.layers as f64);

        let input_proj =
            rng.normal_tensor_scaled(&[cfg.latent_channels, d], 1.0 / (cfg.latent_channels as f64).sqrt());
        let time_proj = rng.normal_tensor_scaled(&[d, d], inv_sqrt_d);
        let null_token = rng.normal_tensor(&[1, d]);
        let output_proj = rng.normal_tensor_scaled(&[d, cfg.latent_channels], inv_sqrt_d);

        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerWeights {
                self_q: rng.normal_tensor_scaled(&[d, d], inv_sqrt_d),
                self_k: rng.normal_tensor_scaled(&[d, d], inv_sqrt_d),
                self_v: rng.normal_tensor_scaled(&[d, d], inv_sqrt_d),
                self_o: rng.normal_tensor_scaled(&[d, d], branch),
                cross_q: rng.normal_tensor_scaled(&[d, d], inv_sqrt_d),
                cross_k: rng.normal_tensor_scaled(&[d, d], inv_sqrt_d),
                cross_v: rng.normal_tensor_scaled(&[d, d], inv_sqrt_d),
                cross_o: rng.normal_tensor_scaled(&[d, d], 0.5 * inv_sqrt_d),
                mlp_in: rng.normal_tensor_scaled(&[d, cfg.mlp_hidden], inv_sqrt_d),
                mlp_out: rng.normal_tensor_scaled(&[cfg.mlp_hidden, d], branch_mlp),
            });
        }

        let pos = position_features(cfg);
        Self { input_proj, output_proj, time_proj, null_token, layers, pos }
    }

    pub fn cross(&self, layer: usize, proj: CrossProj) -> &Tensor {
        let lw = &self.layers[layer];
        match proj {
            CrossProj::Query => &lw.cross_q,
            CrossProj::Key => &lw.cross_k,
            CrossProj::Value => &lw.cross_v,
            CrossProj::Output => &lw.cross_o,
        }
    }

    /// All stored weights with stable names, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input_proj".to_string(), &self.input_proj),
            ("time_proj".to_string(), &self.time_proj),
            ("null_token".to_string(), &self.null_token),
            ("output_proj".to_string(), &self.output_proj),
        ];
        for (i, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.self_q"), &lw.self_q));
            out.push((format!("layer{i}.self_k"), &lw.self_k));
            out.push((format!("layer{i}.self_v"), &lw.self_v));
            out.push((format!("layer{i}.self_o"), &lw.self_o));
            out.push((format!("layer{i}.cross_q"), &lw.cross_q));
            out.push((format!("layer{i}.cross_k"), &lw.cross_k));
            out.push((format!("layer{i}.cross_v"), &lw.cross_v));
            out.push((format!("layer{i}.cross_o"), &lw.cross_o));
            out.push((format!("layer{i}.mlp_in"), &lw.mlp_in));
            out.push((format!("layer{i}.mlp_out"), &lw.mlp_out));
        }
        out
    }
}

/// Noising level `sqrt(1 - alpha_bar_t)` recomputed from the config's
/// linear schedule; scales the input-to-output skip so the untrained
/// model already removes the right share of noise at each timestep.
fn skip_gain(cfg: &ModelConfig, t: usize) -> f64 {
    let mut product = 1.0;
    for i in 0..t.min(cfg.timesteps) {
        let frac = i as f64 / (cfg.timesteps - 1) as f64;
        product *= 1.0 - (cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac);
    }
    (1.0 - product).sqrt()
}

/// Sinusoidal features of the (1-based) timestep, shape `[1, d]`.
fn time_features(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = (10_000f64).powf(-(2.0 * i as f64) / d as f64);
        data[2 * i] = (t as f64 * freq).sin();
        data[2 * i + 1] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(&[1, d], data).expect("time features finite")
}

/// Fixed 2-D sinusoidal position features, shape `[h*w, d]`.
fn position_features(cfg: &ModelConfig) -> Tensor {
    let d = cfg.embed_dim;
    let quarter = d / 4;
    Tensor::from_fn(&[cfg.grid_tokens(), d], |flat| {
        let token = flat / d;
        let j = flat % d;
        let (y, x) = ((token / cfg.grid_w) as f64, (token % cfg.grid_w) as f64);
        let i = j / 4;
        let freq = (10_000f64).powf(-(i as f64) / quarter.max(1) as f64);
        match j % 4 {
            0 => (y * freq).sin(),
            1 => (y * freq).cos(),
            2 => (x * freq).sin(),
            _ => (x * freq).cos(),
        }
    })
}

/// Per-layer transform applied to the `[h*w, d]` feature map after each
/// layer; regional conditioning hooks in here.
pub type LayerHook<'a> = dyn Fn(usize, Tensor) -> Result<Tensor> + 'a;

fn check_deltas(deltas: &[Tensor], cfg: &ModelConfig) -> Result<()> {
    if deltas.len() != slot_count(cfg.layers) {
        return Err(Error::Adapter(format!(
            "expected {} low-rank deltas, got {}",
            slot_count(cfg.layers),
            deltas.len()
        )));
    }
    for (i, t) in deltas.iter().enumerate() {
        if t.shape() != [cfg.embed_dim, cfg.embed_dim] {
            return Err(Error::Adapter(format!(
                "delta {i} has shape {:?}, projection is {}x{}",
                t.shape(),
                cfg.embed_dim,
                cfg.embed_dim
            )));
        }
    }
    Ok(())
}

fn check_cond(cond: &PromptEmbedding, cfg: &ModelConfig) -> Result<()> {
    if cond.per_layer.len() != cfg.layers {
        return Err(Error::Shape(format!(
            "conditioning has {} layers, model has {}",
            cond.per_layer.len(),
            cfg.layers
        )));
    }
    for m in &cond.per_layer {
        if m.shape() != [cfg.prompt_len, cfg.embed_dim] {
            return Err(Error::Shape(format!(
                "conditioning rows have shape {:?}, expected {}x{}",
                m.shape(),
                cfg.prompt_len,
                cfg.embed_dim
            )));
        }
    }
    Ok(())
}

fn attention(
    x: &Tensor,
    kv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    inv_sqrt_d: f64,
) -> Result<Tensor> {
    let q = x.matmul(wq)?;
    let k = kv.matmul(wk)?;
    let v = kv.matmul(wv)?;
    let attn = q.matmul(&k.transpose()?)?.scale(inv_sqrt_d).softmax_rows()?;
    attn.matmul(&v)?.matmul(wo)
}

/// Noise estimate for a noisy latent. `deltas`, when given, hold one
/// `[d, d]` update per adapted projection in slot order.
pub fn forward(
    z_t: &Latent,
    t: usize,
    cond: Option<&PromptEmbedding>,
    weights: &DenoiserWeights,
    deltas: Option<&[Tensor]>,
    cfg: &ModelConfig,
    hook: Option<&LayerHook>,
) -> Result<Latent> {
    if let Some(d) = deltas {
        check_deltas(d, cfg)?;
    }
    if let Some(c) = cond {
        check_cond(c, cfg)?;
    }
    let d = cfg.embed_dim;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut x = z_t.as_matrix().matmul(&weights.input_proj)?;
    x = x.add(&weights.pos)?;
    let trow = time_features(t, d).matmul(&weights.time_proj)?.reshaped(&[d])?;
    x = x.add_row(&trow)?;

    for (l, lw) in weights.layers.iter().enumerate() {
        let sa = attention(&x, &x, &lw.self_q, &lw.self_k, &lw.self_v, &lw.self_o, inv_sqrt_d)?;
        x = x.add(&sa)?;

        let kv = match cond {
            Some(pe) => &pe.per_layer[l],
            None => &weights.null_token,
        };
        let eff = |base: &Tensor, proj: CrossProj| -> Result<Tensor> {
            match deltas {
                Some(ds) => base.add(&ds[slot_index(l, proj)]),
                None => Ok(base.clone()),
            }
        };
        let wq = eff(&lw.cross_q, CrossProj::Query)?;
        let wk = eff(&lw.cross_k, CrossProj::Key)?;
        let wv = eff(&lw.cross_v, CrossProj::Value)?;
        let wo = eff(&lw.cross_o, CrossProj::Output)?;
        let ca = attention(&x, kv, &wq, &wk, &wv, &wo, inv_sqrt_d)?;
        x = x.add(&ca)?;

        let h = x.matmul(&lw.mlp_in)?;
        let hs = h.mul(&h.sigmoid())?;
        let m = hs.matmul(&lw.mlp_out)?;
        x = x.add(&m)?;

        if let Some(hk) = hook {
            x = hk(l, x)?;
        }
    }

    let out = x.matmul(&weights.output_proj)?.add(&z_t.as_matrix().scale(skip_gain(cfg, t)))?;
    Latent::new(out.reshaped(&cfg.latent_shape())?)
}

fn attention_tape(
    tape: &mut GradTape,
    x: VarId,
    kv: VarId,
    wq: VarId,
    wk: VarId,
    wv: VarId,
    wo: VarId,
    inv_sqrt_d: f64,
) -> Result<VarId> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, inv_sqrt_d);
    let attn = tape.softmax_rows(scaled)?;
    let mixed = tape.matmul(attn, v)?;
    tape.matmul(mixed, wo)
}

/// Tape twin of [`forward`]: differentiable with respect to the per-slot
/// delta variables and the per-layer conditioning variables. Returns the
/// `[h*w, d_z]` noise-estimate node.
pub fn forward_tape(
    tape: &mut GradTape,
    z_t: &Latent,
    t: usize,
    cond: Option<&[VarId]>,
    weights: &DenoiserWeights,
    deltas: Option<&[VarId]>,
    cfg: &ModelConfig,
) -> Result<VarId> {
    if let Some(ds) = deltas {
        let values: Vec<Tensor> = ds.iter().map(|&id| tape.value(id).clone()).collect();
        check_deltas(&values, cfg)?;
    }
    if let Some(c) = cond {
        let pe = PromptEmbedding { per_layer: c.iter().map(|&id| tape.value(id).clone()).collect() };
        check_cond(&pe, cfg)?;
    }
    let d = cfg.embed_dim;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let z = tape.leaf(z_t.as_matrix());
    let input_proj = tape.leaf(weights.input_proj.clone());
    let mut x = tape.matmul(z, input_proj)?;
    let pos = tape.leaf(weights.pos.clone());
    x = tape.add(x, pos)?;
    let tf = tape.leaf(time_features(t, d));
    let time_proj = tape.leaf(weights.time_proj.clone());
    let trow2 = tape.matmul(tf, time_proj)?;
    let trow = tape.reshape(trow2, &[d])?;
    x = tape.add_row(x, trow)?;

    let null = tape.leaf(weights.null_token.clone());
    for (l, lw) in weights.layers.iter().enumerate() {
        let sq = tape.leaf(lw.self_q.clone());
        let sk = tape.leaf(lw.self_k.clone());
        let sv = tape.leaf(lw.self_v.clone());
        let so = tape.leaf(lw.self_o.clone());
        let sa = attention_tape(tape, x, x, sq, sk, sv, so, inv_sqrt_d)?;
        x = tape.add(x, sa)?;

        let kv = match cond {
            Some(ids) => ids[l],
            None => null,
        };
        let eff = |tape: &mut GradTape, base: &Tensor, proj: CrossProj| -> Result<VarId> {
            let w0 = tape.leaf(base.clone());
            match deltas {
                Some(ds) => tape.add(w0, ds[slot_index(l, proj)]),
                None => Ok(w0),
            }
        };
        let wq = eff(tape, &lw.cross_q, CrossProj::Query)?;
        let wk = eff(tape, &lw.cross_k, CrossProj::Key)?;
        let wv = eff(tape, &lw.cross_v, CrossProj::Value)?;
        let wo = eff(tape, &lw.cross_o, CrossProj::Output)?;
        let ca = attention_tape(tape, x, kv, wq, wk, wv, wo, inv_sqrt_d)?;
        x = tape.add(x, ca)?;

        let mlp_in = tape.leaf(lw.mlp_in.clone());
        let mlp_out = tape.leaf(lw.mlp_out.clone());
        let h = tape.matmul(x, mlp_in)?;
        let hsig = tape.sigmoid(h);
        let hs = tape.mul(h, hsig)?;
        let m = tape.matmul(hs, mlp_out)?;
        x = tape.add(x, m)?;
    }

    let out_proj = tape.leaf(weights.output_proj.clone());
    let projected = tape.matmul(x, out_proj)?;
    let skip = tape.leaf(z_t.as_matrix().scale(skip_gain(cfg, t)));
    tape.add(projected, skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff, max_rel_err};
    use crate::toyldm::{encode_prompt, PromptSpec, TextEncoder};

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 64, ..ModelConfig::default() }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            embed_dim: 8,
            prompt_len: 4,
            grid_h: 4,
            grid_w: 4,
            mlp_hidden: 16,
            vocab_size: 64,
            ..ModelConfig::default()
        }
    }

    fn noise(cfg: &ModelConfig, seed: u64) -> Latent {
        Latent::new(Rng::new(seed).normal_tensor(&cfg.latent_shape())).unwrap()
    }

    fn zero_deltas(cfg: &ModelConfig) -> Vec<Tensor> {
        (0..slot_count(cfg.layers))
            .map(|_| Tensor::zeros(&[cfg.embed_dim, cfg.embed_dim]))
            .collect()
    }

    #[test]
    fn zero_deltas_match_base_model() {
        let cfg = cfg();
        let w = DenoiserWeights::init(&cfg);
        let z = noise(&cfg, 1);
        let base = forward(&z, 10, None, &w, None, &cfg, None).unwrap();
        let with = forward(&z, 10, None, &w, Some(&zero_deltas(&cfg)), &cfg, None).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = cfg();
        let w = DenoiserWeights::init(&cfg);
        let z = noise(&cfg, 2);
        let a = forward(&z, 42, None, &w, None, &cfg, None).unwrap();
        let b = forward(&z, 42, None, &w, None, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_changes_the_estimate() {
        let cfg = cfg();
        let w = DenoiserWeights::init(&cfg);
        let enc = TextEncoder::new(&cfg);
        let p = PromptSpec::parse("photo of a thing", cfg.prompt_len).unwrap();
        let e = encode_prompt(&p, &enc, &()).unwrap();
        let z = noise(&cfg, 3);
        let uncond = forward(&z, 5, None, &w, None, &cfg, None).unwrap();
        let cond = forward(&z, 5, Some(&e), &w, None, &cfg, None).unwrap();
        assert!(uncond.tensor().max_abs_diff(cond.tensor()) > 1e-9);
    }

    #[test]
    fn wrong_delta_shape_is_an_adapter_error() {
        let cfg = cfg();
        let w = DenoiserWeights::init(&cfg);
        let z = noise(&cfg, 4);
        let mut ds = zero_deltas(&cfg);
        ds[3] = Tensor::zeros(&[2, 2]);
        let err = forward(&z, 1, None, &w, Some(&ds), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Adapter(_)));
    }

    #[test]
    fn tape_forward_matches_plain_forward_bitwise() {
        let cfg = cfg();
        let w = DenoiserWeights::init(&cfg);
        let enc = TextEncoder::new(&cfg);
        let p = PromptSpec::parse("photo of a thing", cfg.prompt_len).unwrap();
        let e = encode_prompt(&p, &enc, &()).unwrap();
        let z = noise(&cfg, 5);
        let mut rng = Rng::new(6);
        let deltas: Vec<Tensor> = (0..slot_count(cfg.layers))
            .map(|_| rng.normal_tensor_scaled(&[cfg.embed_dim, cfg.embed_dim], 0.02))
            .collect();

        let plain = forward(&z, 9, Some(&e), &w, Some(&deltas), &cfg, None).unwrap();

        let mut tape = GradTape::new();
        let cond_ids: Vec<VarId> = e.per_layer.iter().map(|m| tape.leaf(m.clone())).collect();
        let delta_ids: Vec<VarId> = deltas.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = forward_tape(&mut tape, &z, 9, Some(&cond_ids), &w, Some(&delta_ids), &cfg).unwrap();
        let taped = tape.value(out).reshaped(&cfg.latent_shape()).unwrap();
        assert_eq!(*plain.tensor(), taped);
    }

    /// End-to-end differentiability: the reconstruction loss gradient with
    /// respect to deltas and conditioning rows matches finite differences.
    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg);
        let z = noise(&cfg, 7);
        let eps = noise(&cfg, 8);
        let mut rng = Rng::new(9);
        let cond0: Vec<Tensor> =
            (0..cfg.layers).map(|_| rng.normal_tensor(&[cfg.prompt_len, cfg.embed_dim])).collect();
        let deltas0: Vec<Tensor> = (0..slot_count(cfg.layers))
            .map(|_| rng.normal_tensor_scaled(&[cfg.embed_dim, cfg.embed_dim], 0.05))
            .collect();

        let loss_with = |cond: &[Tensor], deltas: &[Tensor]| -> crate::Result<f64> {
            let mut tape = GradTape::new();
            let cond_ids: Vec<VarId> = cond.iter().map(|m| tape.leaf(m.clone())).collect();
            let delta_ids: Vec<VarId> = deltas.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = forward_tape(&mut tape, &z, 3, Some(&cond_ids), &w, Some(&delta_ids), &cfg)?;
            let target = tape.leaf(eps.as_matrix());
            let diff = tape.sub(target, out)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            Ok(tape.value(loss).data()[0])
        };

        // Analytic gradients.
        let mut tape = GradTape::new();
        let cond_ids: Vec<VarId> = cond0.iter().map(|m| tape.leaf(m.clone())).collect();
        let delta_ids: Vec<VarId> = deltas0.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = forward_tape(&mut tape, &z, 3, Some(&cond_ids), &w, Some(&delta_ids), &cfg).unwrap();
        let target = tape.leaf(eps.as_matrix());
        let diff = tape.sub(target, out).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let mut wanted: Vec<VarId> = delta_ids.clone();
        wanted.extend_from_slice(&cond_ids);
        let analytic = tape.grad(loss, &wanted).unwrap();

        // Spot-check one delta slot and one conditioning layer against
        // finite differences.
        let slot = 3;
        let numeric = finite_diff(
            |probe: &Tensor| {
                let mut ds = deltas0.clone();
                ds[slot] = probe.clone();
                loss_with(&cond0, &ds)
            },
            &deltas0[slot],
            1e-6,
        )
        .unwrap();
        let err = max_rel_err(&analytic[slot], &numeric, 1e-3);
        assert!(err < 1e-5, "delta grad rel err {err}");

        let layer = 1;
        let numeric = finite_diff(
            |probe: &Tensor| {
                let mut cs = cond0.clone();
                cs[layer] = probe.clone();
                loss_with(&cs, &deltas0)
            },
            &cond0[layer],
            1e-6,
        )
        .unwrap();
        let err = max_rel_err(&analytic[deltas0.len() + layer], &numeric, 1e-3);
        assert!(err < 1e-5, "cond grad rel err {err}");
    }
}
