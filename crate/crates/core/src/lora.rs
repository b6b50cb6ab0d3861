//! Low-rank adapters on named weight matrices.
//!
//! An adapter on a `[d_out, d_in]` weight `W` holds `A: [r, d_in]` and
//! `B: [d_out, r]`; the adapted layer computes `x W^T + (alpha / r) (x A^T) B^T`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Projection targets: attention Q, K, V and output, plus both MLP layers of
/// every block.
pub const DEFAULT_TARGETS: &[&str] = &[
    "blocks.*.attn.q.weight",
    "blocks.*.attn.k.weight",
    "blocks.*.attn.v.weight",
    "blocks.*.attn.o.weight",
    "blocks.*.mlp.fc1.weight",
    "blocks.*.mlp.fc2.weight",
];

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Glob patterns over parameter names; `*` matches any run of characters.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// `*`-only glob match.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Base name of a weight (`blocks.0.attn.q.weight` -> `blocks.0.attn.q`).
fn layer_of(target: &str) -> &str {
    target.strip_suffix(".weight").unwrap_or(target)
}

pub fn down_name(target: &str) -> String {
    format!("{}.lora_a", layer_of(target))
}

pub fn up_name(target: &str) -> String {
    format!("{}.lora_b", layer_of(target))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// Down projection `[r, d_in]`.
    pub a: Tensor<S>,
    /// Up projection `[d_out, r]`.
    pub b: Tensor<S>,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) B A`, shaped like the target.
    pub fn delta(&self) -> Tensor<S> {
        let (d_out, r) = (self.b.shape()[0], self.rank);
        let d_in = self.a.shape()[1];
        let s = S::of(self.scale());
        let (a, b) = (self.a.data(), self.b.data());
        Tensor::from_fn(&[d_out, d_in], |i| {
            let (o, k) = (i / d_in, i % d_in);
            let mut acc = S::zero();
            for j in 0..r {
                acc += b[o * r + j] * a[j * d_in + k];
            }
            acc * s
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LoraSet<S> {
    adapters: BTreeMap<String, LoraAdapter<S>>,
}

impl<S: Scalar> LoraSet<S> {
    pub fn empty() -> Self {
        LoraSet {
            adapters: BTreeMap::new(),
        }
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter<S>> {
        self.adapters.get(target)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter<S>> {
        self.adapters.values()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::trainable_count).sum()
    }

    /// Adapter tensors by name (`<layer>.lora_a`, `<layer>.lora_b`).
    pub fn tensors(&self) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for ad in self.adapters.values() {
            out.insert(down_name(&ad.target), ad.a.clone());
            out.insert(up_name(&ad.target), ad.b.clone());
        }
        out
    }

    /// Replaces adapter tensors from a name map produced by [`LoraSet::tensors`].
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        for ad in self.adapters.values_mut() {
            for (name, slot) in [(down_name(&ad.target), &mut ad.a), (up_name(&ad.target), &mut ad.b)] {
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::invalid(format!("missing adapter tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::shape(format!(
                        "adapter tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> LoraSet<T> {
        LoraSet {
            adapters: self
                .adapters
                .iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        LoraAdapter {
                            target: a.target.clone(),
                            rank: a.rank,
                            alpha: a.alpha,
                            a: a.a.cast(),
                            b: a.b.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Creates zero-delta adapters on every parameter matched by `config.targets`.
pub fn attach<S: Scalar>(
    params: &BTreeMap<String, Tensor<S>>,
    config: &LoraConfig,
    rng: &mut Rng,
) -> Result<LoraSet<S>> {
    if config.rank == 0 {
        return Err(Error::invalid("adapter rank must be at least 1"));
    }
    let mut adapters = BTreeMap::new();
    for (name, w) in params {
        if !config.targets.iter().any(|p| glob_match(p, name)) {
            continue;
        }
        if w.rank() != 2 {
            return Err(Error::shape(format!("adapter target {name} is not a matrix: {:?}", w.shape())));
        }
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        adapters.insert(
            name.clone(),
            LoraAdapter {
                target: name.clone(),
                rank: config.rank,
                alpha: config.alpha,
                a: Tensor::randn(&[config.rank, d_in], INIT_STD, rng),
                b: Tensor::zeros(&[d_out, config.rank]),
            },
        );
    }
    if adapters.is_empty() {
        return Err(Error::invalid(format!(
            "adapter targets {:?} match no parameter",
            config.targets
        )));
    }
    Ok(LoraSet { adapters })
}

fn apply<S: Scalar>(
    params: &BTreeMap<String, Tensor<S>>,
    lora: &LoraSet<S>,
    sign: S,
) -> Result<BTreeMap<String, Tensor<S>>> {
    let mut out = params.clone();
    for ad in lora.adapters() {
        let w = out
            .get_mut(&ad.target)
            .ok_or_else(|| Error::invalid(format!("adapter target {} not present", ad.target)))?;
        let delta = ad.delta();
        if w.shape() != delta.shape() {
            return Err(Error::shape(format!(
                "adapter delta {:?} does not match {} {:?}",
                delta.shape(),
                ad.target,
                w.shape()
            )));
        }
        if ad.b.data().iter().all(|&x| x == S::zero()) {
            continue;
        }
        for (p, d) in w.data_mut().iter_mut().zip(delta.data()) {
            *p += sign * *d;
        }
    }
    Ok(out)
}

/// Folds every adapter into its target: `W + (alpha / r) B A`.
pub fn merge<S: Scalar>(params: &BTreeMap<String, Tensor<S>>, lora: &LoraSet<S>) -> Result<BTreeMap<String, Tensor<S>>> {
    apply(params, lora, S::one())
}

/// Inverse of [`merge`] up to rounding.
pub fn unmerge<S: Scalar>(merged: &BTreeMap<String, Tensor<S>>, lora: &LoraSet<S>) -> Result<BTreeMap<String, Tensor<S>>> {
    apply(merged, lora, -S::one())
}

/// Rebuilds an adapter set whose tensors live in `ckpt`, using `config` for
/// rank, alpha and targets.
pub fn from_checkpoint(
    params: &BTreeMap<String, Tensor<f32>>,
    config: &LoraConfig,
    ckpt: &Checkpoint,
) -> Result<LoraSet<f32>> {
    let mut set = attach(params, config, &mut crate::rng::substream(0, "lora-shape", &[]))?;
    set.load_tensors(&ckpt.tensors)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn params() -> BTreeMap<String, Tensor<f64>> {
        let mut rng = substream(1, "lora-test", &[]);
        let mut p = BTreeMap::new();
        p.insert("blocks.0.attn.q.weight".into(), Tensor::randn(&[6, 4], 1.0, &mut rng));
        p.insert("blocks.0.attn.q.bias".into(), Tensor::randn(&[6], 1.0, &mut rng));
        p.insert("blocks.0.mlp.fc1.weight".into(), Tensor::randn(&[8, 6], 1.0, &mut rng));
        p.insert("head.weight".into(), Tensor::randn(&[3, 6], 1.0, &mut rng));
        p
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("blocks.*.attn.q.weight", "blocks.12.attn.q.weight"));
        assert!(!glob_match("blocks.*.attn.q.weight", "blocks.1.attn.q.bias"));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("a*b*c", "axxbyyc"));
        assert!(!glob_match("a*b*c", "axxc"));
        assert!(glob_match("exact", "exact"));
    }

    #[test]
    fn attach_counts_and_zero_up() {
        let cfg = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        let set = attach(&params(), &cfg, &mut substream(0, "a", &[])).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.trainable_count(), 2 * (4 + 6) + 2 * (6 + 8));
        assert!(set.adapters().all(|a| a.b.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn empty_selection_is_an_error() {
        let cfg = LoraConfig {
            targets: vec!["nothing.*".into()],
            ..LoraConfig::default()
        };
        let err = attach(&params(), &cfg, &mut substream(0, "a", &[])).unwrap_err();
        assert!(err.to_string().contains("match no parameter"));
    }

    #[test]
    fn zero_up_merge_is_bitwise_noop() {
        let p = params();
        let set = attach(&p, &LoraConfig::default(), &mut substream(0, "a", &[])).unwrap();
        assert_eq!(merge(&p, &set).unwrap(), p);
    }

    #[test]
    fn merge_unmerge_round_trip() {
        let p = params();
        let mut set = attach(&p, &LoraConfig::default(), &mut substream(0, "a", &[])).unwrap();
        let mut rng = substream(2, "b", &[]);
        let mut t = set.tensors();
        for (name, v) in t.iter_mut() {
            if name.ends_with("lora_b") {
                *v = Tensor::randn(v.shape(), 0.5, &mut rng);
            }
        }
        set.load_tensors(&t).unwrap();
        let merged = merge(&p, &set).unwrap();
        assert_ne!(merged, p);
        let back = unmerge(&merged, &set).unwrap();
        for (name, w) in &p {
            let scale = w.data().iter().fold(0f64, |m, x| m.max(x.abs()));
            assert!(back[name].max_abs_diff(w) <= 1e-6 * scale, "{name}");
        }
    }

    #[test]
    fn delta_matches_scaled_product() {
        let ad = LoraAdapter {
            target: "w".into(),
            rank: 1,
            alpha: 2.0,
            a: Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap(),
            b: Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap(),
        };
        assert_eq!(ad.delta().data(), &[6.0, 12.0, -2.0, -4.0]);
    }
}
