//! Adapter finetuning loop.
//!
//! Each step draws a pair and a temporal window from the `data` substream and
//! the flow sample from the `noise` substream, both keyed by the step index, so
//! a run resumed from a checkpoint continues exactly as an uninterrupted one.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{fm_loss, make_sample, BoundDiT};
use crate::autodiff::{warmup_lr, AdamW, AdamWConfig, Checkpoint, Graph, Moments, Tensor};
use crate::codec::TokenGrid;
use crate::dit::{is_block_projection, DiT, DEFAULT_PROMPT};
use crate::error::{Error, Result};
use crate::lora::{attach, LoraConfig, LoraSet, DEFAULT_TARGETS};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<String>,
    /// Also train the non-adapted parameters (embeddings, conditioning, head).
    pub train_auxiliary: bool,
    /// Train every base parameter and attach no adapters (base pretraining).
    pub full_model: bool,
    pub prompt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            warmup_steps: 50,
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size: 1,
            seed: crate::rng::DEFAULT_SEED,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            train_auxiliary: false,
            full_model: false,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be at least 1"));
        }
        Ok(())
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            targets: self.lora_targets.clone(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One training pair in latent space.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub cond: TokenGrid,
    pub target: TokenGrid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl TraceRow {
    pub fn to_line(&self) -> String {
        format!("{}\t{:e}\t{:e}", self.step, self.loss, self.lr)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed loss trace line {line:?}"));
        let mut it = line.split('\t');
        let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let lr = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        Ok(TraceRow { step, loss, lr })
    }
}

/// Trailing mean over the last `window` losses ending at each index.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// SHA-256 over a parameter map, names and values included.
pub fn params_digest(params: &BTreeMap<String, Tensor<f32>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u32).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Trainer {
    pub config: TrainConfig,
    base: DiT<f32>,
    model: DiT<f32>,
    lora: LoraSet<f32>,
    opt: AdamW<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, base: DiT<f32>) -> Result<Self> {
        config.validate()?;
        let lora = if config.full_model {
            LoraSet::empty()
        } else {
            attach(&base.params, &config.lora(), &mut substream(config.seed, "lora-init", &[]))?
        };
        let opt = AdamW::new(config.adamw());
        Ok(Trainer {
            config,
            model: base.clone(),
            base,
            lora,
            opt,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    /// The frozen base the adapters were trained against.
    pub fn base(&self) -> &DiT<f32> {
        &self.base
    }

    /// Base with trained auxiliary parameters applied (adapters kept separate).
    pub fn model(&self) -> &DiT<f32> {
        &self.model
    }

    pub fn lora(&self) -> &LoraSet<f32> {
        &self.lora
    }

    /// Whether `name` (a base parameter or adapter tensor) receives updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.full_model
            || name.ends_with(".lora_a")
            || name.ends_with(".lora_b")
            || (self.config.train_auxiliary && !is_block_projection(name))
    }

    /// Current values of every trainable tensor.
    pub fn trainable(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = self.lora.tensors();
        if self.config.train_auxiliary || self.config.full_model {
            for (k, v) in &self.model.params {
                if self.config.full_model || !is_block_projection(k) {
                    out.insert(k.clone(), v.clone());
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().values().map(Tensor::numel).sum()
    }

    fn store(&mut self, params: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.lora.load_tensors(params)?;
        for (k, v) in params {
            if let Some(slot) = self.model.params.get_mut(k) {
                *slot = v.clone();
            }
        }
        Ok(())
    }

    /// One optimizer step; returns the trace row (mean loss over the batch).
    pub fn step(&mut self, data: &[TrainPair]) -> Result<TraceRow> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let step = self.opt.step_count();
        let lr = warmup_lr(self.config.lr, self.config.warmup_steps, step);
        let mut data_rng = substream(self.config.seed, "data", &[step]);
        let mut noise_rng = substream(self.config.seed, "noise", &[step]);
        let wr = self.model.config.window_rows();
        let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..self.config.batch_size {
            let pair = &data[data_rng.random_range(0..data.len())];
            let rows = pair.cond.lattice()[0];
            let len = wr.min(rows);
            let start = data_rng.random_range(0..=rows - len);
            let cw = pair.cond.time_window(start, len)?;
            let tw = pair.target.time_window(start, len)?;
            let sample = make_sample(cw.tokens().clone(), tw.tokens().clone(), &mut noise_rng)?;

            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, Some(&self.lora), &|n| self.is_trainable(n))?;
            let vars: Vec<(String, _)> = bound
                .vars
                .iter()
                .filter(|(n, _)| self.is_trainable(n))
                .map(|(n, &v)| (n.clone(), v))
                .collect();
            let model = BoundDiT {
                model: &self.model,
                bound,
                positions: cw.positions(),
            };
            let loss = fm_loss(&mut g, &model, &sample, &self.config.prompt)?;
            loss_sum += f64::from(g.value(loss).data()[0]);
            let mut grads = g.backward(loss)?;
            for (name, var) in vars {
                let gt = grads.take(var).unwrap_or_else(|| Tensor::zeros(g.shape(var)));
                match sum.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, gt);
                    }
                }
            }
        }
        let b = self.config.batch_size as f32;
        if self.config.batch_size > 1 {
            for t in sum.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x /= b);
            }
        }
        let mut params = self.trainable();
        self.opt.step_with_lr(&mut params, &sum, lr)?;
        self.store(&params)?;
        Ok(TraceRow {
            step,
            loss: loss_sum / self.config.batch_size as f64,
            lr,
        })
    }

    /// Adapter checkpoint: trainable tensors, optimizer moments and step count.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "kind": "adapter",
            "base_digest": params_digest(&self.base.params),
            "step": self.opt.step_count(),
            "model": self.model.config,
            "train": self.config,
        });
        let mut ck = Checkpoint::new(Some(header.to_string()));
        ck.tensors = self.trainable();
        for (name, m) in self.opt.moments() {
            ck.tensors.insert(format!("optim/m/{name}"), m.m.clone());
            ck.tensors.insert(format!("optim/v/{name}"), m.v.clone());
        }
        Ok(ck)
    }

    /// Restores a trainer from an adapter checkpoint made against `base`.
    /// `config` may extend `steps`; everything else should match the saved run.
    pub fn from_checkpoint(config: TrainConfig, base: DiT<f32>, ck: &Checkpoint, origin: &std::path::Path) -> Result<Self> {
        let header = ck
            .header_json()?
            .ok_or_else(|| Error::format(origin, "adapter checkpoint has no header"))?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("adapter") {
            return Err(Error::format(origin, "not an adapter checkpoint"));
        }
        let digest = params_digest(&base.params);
        if header.get("base_digest").and_then(|d| d.as_str()) != Some(digest.as_str()) {
            return Err(Error::format(origin, "adapter was trained against a different base model"));
        }
        let step = header
            .get("step")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::format(origin, "adapter header lacks a step count"))?;
        let mut tr = Trainer::new(config, base)?;
        let mut params = BTreeMap::new();
        let mut moments: BTreeMap<String, Moments<f32>> = BTreeMap::new();
        for name in tr.trainable().keys() {
            let get = |key: &str| {
                ck.tensors
                    .get(key)
                    .cloned()
                    .ok_or_else(|| Error::format(origin, format!("missing tensor {key}")))
            };
            params.insert(name.clone(), get(name)?);
            if step > 0 {
                let m = get(&format!("optim/m/{name}"))?;
                let v = get(&format!("optim/v/{name}"))?;
                moments.insert(name.clone(), Moments { m, v });
            }
        }
        tr.store(&params).map_err(|e| Error::format(origin, e.to_string()))?;
        tr.opt = AdamW::from_state(tr.config.adamw(), step, moments);
        Ok(tr)
    }
}

/// Loads the trained adapters and auxiliary tensors onto a base for inference.
pub fn load_adapted(base: &DiT<f32>, ck: &Checkpoint, origin: &std::path::Path) -> Result<(DiT<f32>, LoraSet<f32>)> {
    let header = ck
        .header_json()?
        .ok_or_else(|| Error::format(origin, "adapter checkpoint has no header"))?;
    let config: TrainConfig = serde_json::from_value(header["train"].clone())
        .map_err(|e| Error::format(origin, format!("bad training config in header: {e}")))?;
    let tr = Trainer::from_checkpoint(config, base.clone(), ck, origin)?;
    Ok((tr.model, tr.lora))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, PatchSpec};
    use crate::dit::DiTConfig;
    use crate::flow::to_latent;
    use crate::video::VideoClip;

    fn tiny() -> DiTConfig {
        DiTConfig {
            dim: 12,
            heads: 2,
            blocks: 1,
            patch: PatchSpec::new(1, 2, 2),
            segment_frames: 1,
            ..DiTConfig::default()
        }
    }

    fn pairs() -> Vec<TrainPair> {
        (0..2)
            .map(|k| {
                let make = |off: f32| {
                    let data = (0..2 * 4 * 4 * 3).map(|i| ((i as f32 * 0.37 + off).sin() + 1.0) / 2.0).collect();
                    let clip = VideoClip::new(2, 4, 4, 3, (8, 1), data).unwrap();
                    to_latent(&encode(&clip, PatchSpec::new(1, 2, 2)).unwrap()).unwrap()
                };
                TrainPair {
                    cond: make(k as f32),
                    target: make(k as f32 + 0.5),
                }
            })
            .collect()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            warmup_steps: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let base = DiT::<f32>::init(tiny(), 1).unwrap();
        let mut tr = Trainer::new(TrainConfig { lr: 0.0, ..config() }, base.clone()).unwrap();
        let before = tr.trainable();
        for _ in 0..5 {
            tr.step(&pairs()).unwrap();
        }
        assert_eq!(tr.trainable(), before);
        assert_eq!(tr.model().params, base.params);
    }

    #[test]
    fn base_projections_stay_frozen() {
        let base = DiT::<f32>::init(tiny(), 1).unwrap();
        let mut tr = Trainer::new(config(), base.clone()).unwrap();
        for _ in 0..5 {
            tr.step(&pairs()).unwrap();
        }
        for (k, v) in &tr.model().params {
            if is_block_projection(k) {
                assert_eq!(v, &base.params[k], "{k}");
            }
        }
        assert_ne!(tr.trainable(), Trainer::new(config(), base).unwrap().trainable());
    }

    #[test]
    fn resume_matches_straight_run() {
        let base = DiT::<f32>::init(tiny(), 2).unwrap();
        let data = pairs();
        let mut straight = Trainer::new(config(), base.clone()).unwrap();
        let rows_a: Vec<_> = (0..6).map(|_| straight.step(&data).unwrap()).collect();
        let mut first = Trainer::new(config(), base.clone()).unwrap();
        let mut rows_b: Vec<_> = (0..3).map(|_| first.step(&data).unwrap()).collect();
        let ck = Checkpoint::from_bytes(&first.to_checkpoint().unwrap().to_bytes(), std::path::Path::new("a")).unwrap();
        let mut second = Trainer::from_checkpoint(config(), base, &ck, std::path::Path::new("a")).unwrap();
        rows_b.extend((0..3).map(|_| second.step(&data).unwrap()));
        assert_eq!(rows_a, rows_b);
        assert_eq!(straight.trainable(), second.trainable());
    }

    #[test]
    fn wrong_base_is_rejected() {
        let tr = Trainer::new(config(), DiT::<f32>::init(tiny(), 1).unwrap()).unwrap();
        let ck = tr.to_checkpoint().unwrap();
        let other = DiT::<f32>::init(tiny(), 9).unwrap();
        assert!(Trainer::from_checkpoint(config(), other, &ck, std::path::Path::new("x")).is_err());
    }

    #[test]
    fn warmup_schedule_in_trace() {
        let mut tr = Trainer::new(TrainConfig { lr: 1e-3, warmup_steps: 4, ..config() }, DiT::init(tiny(), 1).unwrap()).unwrap();
        let lrs: Vec<f64> = (0..6).map(|_| tr.step(&pairs()).unwrap().lr).collect();
        let expect = [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn trace_lines_round_trip() {
        let r = TraceRow {
            step: 7,
            loss: 0.123_456_789,
            lr: 1e-4,
        };
        assert_eq!(TraceRow::parse(&r.to_line()).unwrap(), r);
        assert!(TraceRow::parse("7\tx\t1").is_err());
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        let s = smoothed(&[1.0, 3.0, 5.0, 7.0], 2);
        assert_eq!(s, vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn empty_training_set_fails() {
        let mut tr = Trainer::new(config(), DiT::init(tiny(), 1).unwrap()).unwrap();
        assert!(tr.step(&[]).is_err());
    }
}
