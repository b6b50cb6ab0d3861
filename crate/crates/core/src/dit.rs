//! Video-to-video diffusion transformer.
//!
//! Condition tokens (the clean source clip) and generation tokens (the noisy
//! target) are projected, tagged with the shared positional embedding and a
//! learned stream embedding, and concatenated condition-first. Every block is a
//! pre-norm attention + MLP pair with adaptive layer-norm modulation driven by
//! the timestep and prompt embedding. Condition queries may not attend to
//! generation keys, so condition hidden states never depend on the noisy
//! stream. The head reads generation rows only.
//!
//! By default the head emits the velocity directly. With [`Prediction::Clean`]
//! it predicts the clean target `x1` instead and the returned velocity is
//! `(x1_hat - x_t) / max(1 - t, min_gap)`, the velocity of the straight path
//! through `x_t` that ends at the prediction.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoolMask, Checkpoint, Graph, Scalar, Tensor, Var};
use crate::codec::{positional_embedding, PatchSpec, Position, TokenGrid};
use crate::error::{Error, Result};
use crate::lora::{down_name, up_name, LoraSet};
use crate::rng::{substream, Rng};

pub const DEFAULT_PROMPT: &str = "Humanoid video";
const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub patch: PatchSpec,
    pub channels: usize,
    pub prompts: Vec<String>,
    /// Frames per attention window; a clip is processed window by window.
    pub segment_frames: usize,
    pub prediction: Prediction,
    /// Lower bound on `1 - t` when turning a clean prediction into a velocity.
    pub min_gap: f64,
}

/// What the output head regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// The head emits the velocity directly.
    Velocity,
    /// The head emits the clean latent `x1`; velocity is `(x1 - x_t) / (1 - t)`.
    Clean,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            dim: 120,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            patch: PatchSpec::new(2, 4, 4),
            channels: 3,
            prompts: vec![
                DEFAULT_PROMPT.to_string(),
                "Robot video".to_string(),
                "Human video".to_string(),
            ],
            segment_frames: 2,
            prediction: Prediction::Velocity,
            min_gap: 0.05,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.dim == 0 || self.heads == 0 || self.blocks == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return fail(format!(
                "model extents must be positive (dim {}, heads {}, blocks {}, mlp_ratio {}, channels {})",
                self.dim, self.heads, self.blocks, self.mlp_ratio, self.channels
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(6) {
            return fail(format!("dim {} must be divisible by 6 for the positional embedding", self.dim));
        }
        if !self.prompts.iter().any(|p| p == DEFAULT_PROMPT) {
            return fail(format!("prompt vocabulary must contain {DEFAULT_PROMPT:?}"));
        }
        if self.patch.voxels() == 0 {
            return fail("patch extents must be positive".into());
        }
        if self.segment_frames == 0 || !self.segment_frames.is_multiple_of(self.patch.pt) {
            return fail(format!(
                "segment_frames {} must be a positive multiple of the temporal patch {}",
                self.segment_frames, self.patch.pt
            ));
        }
        if !(self.min_gap > 0.0 && self.min_gap <= 1.0) {
            return fail(format!("min_gap {} must lie in (0, 1]", self.min_gap));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.patch.token_dim(self.channels)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn prompt_index(&self, prompt: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p == prompt)
            .ok_or_else(|| Error::invalid(format!("prompt {prompt:?} is not in the vocabulary {:?}", self.prompts)))
    }

    /// Temporal lattice rows per attention window.
    pub fn window_rows(&self) -> usize {
        self.segment_frames / self.patch.pt
    }
}

/// Attention permission matrix over a condition-first sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask {
    pub n_con: usize,
    pub n_gen: usize,
    pub allowed: Arc<BoolMask>,
}

pub fn build_mask(n_con: usize, n_gen: usize) -> Result<ConditionMask> {
    if n_con == 0 || n_gen == 0 {
        return Err(Error::invalid(format!(
            "mask needs at least one token per stream, got n_con={n_con} n_gen={n_gen}"
        )));
    }
    let n = n_con + n_gen;
    let allowed = BoolMask::from_fn(n, n, |r, c| r >= n_con || c < n_con);
    Ok(ConditionMask {
        n_con,
        n_gen,
        allowed: Arc::new(allowed),
    })
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    Zeros,
    Normal(f64),
    Xavier,
}

fn linear_specs(out: &mut Vec<Spec>, name: &str, d_in: usize, d_out: usize, init: Init) {
    out.push(Spec {
        name: format!("{name}.weight"),
        shape: vec![d_out, d_in],
        init,
    });
    out.push(Spec {
        name: format!("{name}.bias"),
        shape: vec![d_out],
        init: Init::Zeros,
    });
}

fn param_specs(cfg: &DiTConfig) -> Vec<Spec> {
    let d = cfg.dim;
    let td = cfg.token_dim();
    let mut s = Vec::new();
    linear_specs(&mut s, "embed.proj", td, d, Init::Xavier);
    s.push(Spec {
        name: "embed.stream".into(),
        shape: vec![2, d],
        init: Init::Normal(0.02),
    });
    s.push(Spec {
        name: "prompt.table".into(),
        shape: vec![cfg.prompts.len(), d],
        init: Init::Normal(0.02),
    });
    linear_specs(&mut s, "time.fc1", d, d, Init::Normal(0.02));
    linear_specs(&mut s, "time.fc2", d, d, Init::Normal(0.02));
    for b in 0..cfg.blocks {
        let p = format!("blocks.{b}");
        linear_specs(&mut s, &format!("{p}.adaln"), d, 6 * d, Init::Zeros);
        for proj in ["q", "k", "v", "o"] {
            linear_specs(&mut s, &format!("{p}.attn.{proj}"), d, d, Init::Xavier);
        }
        linear_specs(&mut s, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, Init::Xavier);
        linear_specs(&mut s, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, Init::Xavier);
    }
    linear_specs(&mut s, "final.adaln", d, 2 * d, Init::Zeros);
    linear_specs(&mut s, "final.head", d, td, Init::Zeros);
    s
}

/// Sum of element counts over a tensor map.
pub fn count_parameters<S: Scalar>(params: &BTreeMap<String, Tensor<S>>) -> usize {
    params.values().map(Tensor::numel).sum()
}

/// True for parameters that sit on the adapter target set of a block
/// (their weights and biases stay frozen during finetuning).
pub fn is_block_projection(name: &str) -> bool {
    name.starts_with("blocks.") && (name.contains(".attn.") || name.contains(".mlp."))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiT<S> {
    pub config: DiTConfig,
    pub params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> DiT<S> {
    pub fn init(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng: Rng = substream(seed, "dit-init", &[]);
        let mut params = BTreeMap::new();
        for spec in param_specs(&config) {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Normal(std) => Tensor::randn(&spec.shape, std, &mut rng),
                Init::Xavier => {
                    let std = (2.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    Tensor::randn(&spec.shape, std, &mut rng)
                }
            };
            params.insert(spec.name, t);
        }
        // keys start equal to queries so that tokens at the same position
        // attend to each other from the first step
        for b in 0..config.blocks {
            let q = params[&format!("blocks.{b}.attn.q.weight")].clone();
            params.insert(format!("blocks.{b}.attn.k.weight"), q);
        }
        Ok(DiT { config, params })
    }

    pub fn from_params(config: DiTConfig, params: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        for spec in param_specs(&config) {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter {}", spec.name))),
            }
        }
        if params.len() != param_specs(&config).len() {
            return Err(Error::invalid("parameter set contains unexpected tensors"));
        }
        Ok(DiT { config, params })
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    pub fn cast<T: Scalar>(&self) -> DiT<T> {
        DiT {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts parameters (and adapter tensors) into `g`. Names for which
    /// `trainable` returns true become differentiable leaves.
    pub fn bind(&self, g: &mut Graph<S>, lora: Option<&LoraSet<S>>, trainable: &dyn Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        let mut put = |g: &mut Graph<S>, name: String, t: &Tensor<S>| -> Result<()> {
            let v = if trainable(&name) { g.param(t.clone())? } else { g.constant(t.clone())? };
            vars.insert(name, v);
            Ok(())
        };
        for (name, t) in &self.params {
            put(g, name.clone(), t)?;
        }
        let mut scales = BTreeMap::new();
        if let Some(set) = lora {
            for ad in set.adapters() {
                if !self.params.contains_key(&ad.target) {
                    return Err(Error::invalid(format!("adapter target {} is not a model parameter", ad.target)));
                }
                put(g, down_name(&ad.target), &ad.a)?;
                put(g, up_name(&ad.target), &ad.b)?;
                scales.insert(ad.target.clone(), ad.scale());
            }
        }
        Ok(Bound { vars, scales })
    }
}

/// Graph handles for one bound parameter set.
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
    scales: BTreeMap<String, f64>,
}

impl Bound {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }
}

/// Inputs to one forward pass over a single window.
pub struct ForwardInput<'a, S> {
    pub cond: &'a Tensor<S>,
    pub gen: &'a Tensor<S>,
    /// Lattice positions shared by both streams.
    pub positions: &'a [Position],
    pub t: f64,
    pub prompt: &'a str,
}

pub struct ForwardOutput {
    pub velocity: Var,
    /// Hidden states after the input embedding and after each block (all rows).
    pub hidden: Vec<Var>,
    pub n_con: usize,
}

fn linear<S: Scalar>(g: &mut Graph<S>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w_name = format!("{name}.weight");
    let w = b.var(&w_name)?;
    let mut y = g.matmul_t(x, w)?;
    if let Some(&scale) = b.scales.get(&w_name) {
        let a = b.var(&down_name(&w_name))?;
        let up = b.var(&up_name(&w_name))?;
        let low = g.matmul_t(x, a)?;
        let delta = g.matmul_t(low, up)?;
        let delta = g.scale(delta, scale)?;
        y = g.add(y, delta)?;
    }
    g.add_broadcast(y, b.var(&format!("{name}.bias"))?)
}

fn row<S: Scalar>(g: &mut Graph<S>, m: Var, index: usize, d: usize) -> Result<Var> {
    let s = g.slice(m, 1, index * d, d)?;
    g.reshape(s, &[d])
}

fn modulate<S: Scalar>(g: &mut Graph<S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xn = g.layer_norm(x, None, None, LN_EPS)?;
    let s1 = g.add_scalar(scale, 1.0)?;
    let y = g.mul_broadcast(xn, s1)?;
    g.add_broadcast(y, shift)
}

/// Sinusoidal timestep features, `dim / 2` cosines then `dim / 2` sines.
pub fn timestep_features<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let j = i % half;
        let f = 10000f64.powf(-(j as f64) / half as f64);
        let a = t * TIME_SCALE * f;
        S::of(if i < half { a.cos() } else { a.sin() })
    })
}

fn attention<S: Scalar>(g: &mut Graph<S>, b: &Bound, cfg: &DiTConfig, p: &str, x: Var, mask: &ConditionMask) -> Result<Var> {
    let q = linear(g, b, &format!("{p}.attn.q"), x)?;
    let k = linear(g, b, &format!("{p}.attn.k"), x)?;
    let v = linear(g, b, &format!("{p}.attn.v"), x)?;
    let hd = cfg.head_dim();
    let inv = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice(q, 1, h * hd, hd)?;
        let kh = g.slice(k, 1, h * hd, hd)?;
        let vh = g.slice(v, 1, h * hd, hd)?;
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, inv)?;
        let probs = g.softmax_lastdim(logits, Some(&mask.allowed))?;
        heads.push(g.matmul(probs, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    linear(g, b, &format!("{p}.attn.o"), joined)
}

/// One forward pass over a condition/generation window pair.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &DiTConfig,
    input: &ForwardInput<'_, S>,
    mask: Option<&ConditionMask>,
) -> Result<ForwardOutput> {
    let td = cfg.token_dim();
    let d = cfg.dim;
    let n = input.positions.len();
    for (what, x) in [("condition", input.cond), ("generation", input.gen)] {
        if x.shape() != [n, td] {
            return Err(Error::shape(format!(
                "{what} tokens {:?} do not match the lattice of {n} positions with token dim {td}",
                x.shape()
            )));
        }
    }
    let prompt = cfg.prompt_index(input.prompt)?;
    let owned;
    let mask = match mask {
        Some(m) if m.n_con == n && m.n_gen == n => m,
        Some(m) => {
            return Err(Error::shape(format!(
                "mask for {}+{} tokens used with {n}+{n}",
                m.n_con, m.n_gen
            )))
        }
        None => {
            owned = build_mask(n, n)?;
            &owned
        }
    };

    let pos = g.constant(positional_embedding::<S>(input.positions, d)?)?;
    let stream = b.var("embed.stream")?;
    let mut streams = Vec::with_capacity(2);
    for (role, tokens) in [input.cond, input.gen].into_iter().enumerate() {
        let x = g.constant(tokens.clone())?;
        let h = linear(g, b, "embed.proj", x)?;
        let h = g.add(h, pos)?;
        let tag = g.slice(stream, 0, role, 1)?;
        let tag = g.reshape(tag, &[d])?;
        streams.push(g.add_broadcast(h, tag)?);
    }
    let mut h = g.concat(&streams, 0)?;

    let tf = g.constant(timestep_features::<S>(input.t, d))?;
    let c = linear(g, b, "time.fc1", tf)?;
    let c = g.silu(c)?;
    let c = linear(g, b, "time.fc2", c)?;
    let table = b.var("prompt.table")?;
    let pe = g.slice(table, 0, prompt, 1)?;
    let c = g.add(c, pe)?;
    let c = g.silu(c)?;

    let mut hidden = vec![h];
    for blk in 0..cfg.blocks {
        let p = format!("blocks.{blk}");
        let m = linear(g, b, &format!("{p}.adaln"), c)?;
        let [sh1, sc1, g1, sh2, sc2, g2] = [0, 1, 2, 3, 4, 5].map(|i| row(g, m, i, d));
        let x = modulate(g, h, sh1?, sc1?)?;
        let a = attention(g, b, cfg, &p, x, mask)?;
        let a = g.mul_broadcast(a, g1?)?;
        h = g.add(h, a)?;
        let x = modulate(g, h, sh2?, sc2?)?;
        let x = linear(g, b, &format!("{p}.mlp.fc1"), x)?;
        let x = g.gelu(x)?;
        let x = linear(g, b, &format!("{p}.mlp.fc2"), x)?;
        let x = g.mul_broadcast(x, g2?)?;
        h = g.add(h, x)?;
        hidden.push(h);
    }

    let m = linear(g, b, "final.adaln", c)?;
    let shift = row(g, m, 0, d)?;
    let scale = row(g, m, 1, d)?;
    let hg = g.slice(h, 0, n, n)?;
    let x = modulate(g, hg, shift, scale)?;
    let out = linear(g, b, "final.head", x)?;
    let velocity = match cfg.prediction {
        Prediction::Velocity => out,
        Prediction::Clean => {
            let xt = g.constant(input.gen.clone())?;
            let diff = g.sub(out, xt)?;
            g.scale(diff, 1.0 / (1.0 - input.t).max(cfg.min_gap))?
        }
    };
    Ok(ForwardOutput {
        velocity,
        hidden,
        n_con: n,
    })
}

/// Velocity for a whole clip: the lattice is cut into windows of
/// `segment_frames` along time and each window pair is run independently.
pub fn clip_velocity(
    model: &DiT<f32>,
    lora: Option<&LoraSet<f32>>,
    cond: &TokenGrid,
    gen: &Tensor<f32>,
    t: f64,
    prompt: &str,
) -> Result<Tensor<f32>> {
    let cfg = &model.config;
    if cond.patch() != cfg.patch || cond.channels() != cfg.channels {
        return Err(Error::shape(format!(
            "clip tokens use patch {:?} x {} channels, model expects {:?} x {}",
            cond.patch(),
            cond.channels(),
            cfg.patch,
            cfg.channels
        )));
    }
    if gen.shape() != cond.tokens().shape() {
        return Err(Error::shape(format!(
            "generation state {:?} does not match condition tokens {:?}",
            gen.shape(),
            cond.tokens().shape()
        )));
    }
    let rows = cond.lattice()[0];
    let per = cond.row_len() * cond.dim();
    let wr = cfg.window_rows();
    let mut out = Vec::with_capacity(gen.numel());
    let mut mask: Option<ConditionMask> = None;
    let mut start = 0;
    while start < rows {
        let len = wr.min(rows - start);
        let cw = cond.time_window(start, len)?;
        let gw = Tensor::new(cw.tokens().shape().to_vec(), gen.data()[start * per..(start + len) * per].to_vec())?;
        let n = cw.count();
        if mask.as_ref().is_none_or(|m| m.n_con != n) {
            mask = Some(build_mask(n, n)?);
        }
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, lora, &|_| false)?;
        let input = ForwardInput {
            cond: cw.tokens(),
            gen: &gw,
            positions: cw.positions(),
            t,
            prompt,
        };
        let res = forward(&mut g, &bound, cfg, &input, mask.as_ref())?;
        out.extend_from_slice(g.value(res.velocity).data());
        start += len;
    }
    Tensor::new(gen.shape().to_vec(), out)
}

/// Stores a base model with a JSON header describing it.
pub fn to_checkpoint(model: &DiT<f32>, extra: serde_json::Value) -> Result<Checkpoint> {
    let mut header = serde_json::json!({
        "kind": "base",
        "model": model.config,
    });
    if let (Some(h), serde_json::Value::Object(extra)) = (header.as_object_mut(), extra) {
        h.extend(extra);
    }
    let mut ck = Checkpoint::new(Some(header.to_string()));
    ck.tensors = model.params.clone();
    Ok(ck)
}

pub fn from_checkpoint(ck: &Checkpoint, origin: &std::path::Path) -> Result<DiT<f32>> {
    let header = ck
        .header_json()?
        .ok_or_else(|| Error::format(origin, "checkpoint has no header"))?;
    if header.get("kind").and_then(|k| k.as_str()) != Some("base") {
        return Err(Error::format(origin, "not a base model checkpoint"));
    }
    let cfg: DiTConfig = serde_json::from_value(header["model"].clone())
        .map_err(|e| Error::format(origin, format!("bad model config: {e}")))?;
    DiT::from_params(cfg, ck.tensors.clone()).map_err(|e| Error::format(origin, e.to_string()))
}
