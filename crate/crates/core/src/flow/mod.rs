//! Flow matching on the straight noise-to-data path.
//!
//! `x_t = t x1 + (1 - t) x0`, target velocity `x1 - x0`, sampling by explicit
//! Euler integration from `t = 0` to `t = 1`.

pub mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::codec::{decode_clamped, encode, PatchSpec, Position, TokenGrid};
use crate::dit::{clip_velocity, forward, Bound, DiT, ForwardInput};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::rng::{substream, Rng};
use crate::video::VideoClip;

pub use train::{TraceRow, TrainConfig, Trainer};

/// Pixel values in `[0, 1]` to model latents in `[-1, 1]`.
pub fn to_latent(grid: &TokenGrid) -> Result<TokenGrid> {
    grid.with_tokens(grid.tokens().map(|x| 2.0 * x - 1.0))
}

/// Latent tokens back to a clip, clamping into the valid pixel range.
pub fn from_latent(grid: &TokenGrid) -> Result<VideoClip> {
    decode_clamped(&grid.with_tokens(grid.tokens().map(|x| (x + 1.0) * 0.5))?)
}

pub fn encode_latent(clip: &VideoClip, patch: PatchSpec) -> Result<TokenGrid> {
    to_latent(&encode(clip, patch)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<S> {
    pub x1_con: Tensor<S>,
    pub x1_gen: Tensor<S>,
    pub x0: Tensor<S>,
    pub t: f64,
    pub xt: Tensor<S>,
    pub vt: Tensor<S>,
}

/// Builds a sample at a given noise draw and time.
pub fn make_sample_at<S: Scalar>(x1_con: Tensor<S>, x1_gen: Tensor<S>, x0: Tensor<S>, t: f64) -> Result<FlowSample<S>> {
    if x1_con.shape() != x1_gen.shape() || x0.shape() != x1_gen.shape() {
        return Err(Error::shape(format!(
            "flow sample operands disagree: condition {:?}, target {:?}, noise {:?}",
            x1_con.shape(),
            x1_gen.shape(),
            x0.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    let ts = S::of(t);
    let omt = S::of(1.0 - t);
    let data = x1_gen.data().iter().zip(x0.data()).map(|(&a, &b)| ts * a + omt * b).collect();
    let xt = Tensor::new(x1_gen.shape().to_vec(), data)?;
    let data = x1_gen.data().iter().zip(x0.data()).map(|(&a, &b)| a - b).collect();
    let vt = Tensor::new(x1_gen.shape().to_vec(), data)?;
    Ok(FlowSample {
        x1_con,
        x1_gen,
        x0,
        t,
        xt,
        vt,
    })
}

/// Draws `t ~ U[0, 1]` and standard normal noise.
pub fn make_sample<S: Scalar>(x1_con: Tensor<S>, x1_gen: Tensor<S>, rng: &mut Rng) -> Result<FlowSample<S>> {
    let t: f64 = rng.random();
    let x0 = Tensor::randn(x1_gen.shape(), 1.0, rng);
    make_sample_at(x1_con, x1_gen, x0, t)
}

/// Anything that can predict a velocity for the generation positions of a
/// sample inside a graph.
pub trait FlowModel<S: Scalar> {
    fn predict(&self, g: &mut Graph<S>, sample: &FlowSample<S>, prompt: &str) -> Result<Var>;
}

/// Mean squared velocity error over generation positions. Condition positions
/// carry no target and are not part of the mean.
pub fn fm_loss<S: Scalar>(g: &mut Graph<S>, model: &dyn FlowModel<S>, sample: &FlowSample<S>, prompt: &str) -> Result<Var> {
    let pred = model.predict(g, sample, prompt)?;
    if g.shape(pred) != sample.vt.shape() {
        return Err(Error::shape(format!(
            "model predicted {:?}, target velocity is {:?}",
            g.shape(pred),
            sample.vt.shape()
        )));
    }
    let target = g.constant(sample.vt.clone())?;
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::non_finite(format!("flow-matching loss is {value}")));
    }
    Ok(loss)
}

/// A transformer already bound into a graph, applied to one window.
pub struct BoundDiT<'a, S> {
    pub model: &'a DiT<S>,
    pub bound: Bound,
    pub positions: &'a [Position],
}

impl<S: Scalar> FlowModel<S> for BoundDiT<'_, S> {
    fn predict(&self, g: &mut Graph<S>, sample: &FlowSample<S>, prompt: &str) -> Result<Var> {
        let input = ForwardInput {
            cond: &sample.x1_con,
            gen: &sample.xt,
            positions: self.positions,
            t: sample.t,
            prompt,
        };
        Ok(forward(g, &self.bound, &self.model.config, &input, None)?.velocity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 32,
            seed: crate::rng::DEFAULT_SEED,
            scheme: Scheme::Euler,
        }
    }
}

/// A velocity field over a state tensor.
pub trait VelocityField<S: Scalar> {
    fn velocity(&self, x: &Tensor<S>, t: f64) -> Result<Tensor<S>>;
}

impl<S: Scalar, F: Fn(&Tensor<S>, f64) -> Result<Tensor<S>>> VelocityField<S> for F {
    fn velocity(&self, x: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        self(x, t)
    }
}

/// Euler integration with `steps` uniform steps starting from `x0` at `t = 0`.
pub fn integrate<S: Scalar>(field: &dyn VelocityField<S>, x0: Tensor<S>, steps: usize) -> Result<Tensor<S>> {
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    let h = S::of(1.0 / steps as f64);
    let mut x = x0;
    for k in 0..steps {
        let v = field.velocity(&x, k as f64 / steps as f64)?;
        if v.shape() != x.shape() {
            return Err(Error::shape(format!("velocity {:?} does not match state {:?}", v.shape(), x.shape())));
        }
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += h * vi;
        }
        if !x.is_finite() {
            return Err(Error::non_finite(format!("sampler state became non-finite at step {k}")));
        }
    }
    Ok(x)
}

/// Noise draw for the sampler, a function of the seed only.
pub fn sampler_noise<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    Tensor::randn(shape, 1.0, &mut substream(seed, "sampler", &[]))
}

/// Edits a latent token grid: integrates the model's field conditioned on `cond`.
pub fn sample_edit(
    model: &DiT<f32>,
    lora: Option<&LoraSet<f32>>,
    cond: &TokenGrid,
    sampler: &SamplerConfig,
    prompt: &str,
) -> Result<TokenGrid> {
    model.config.prompt_index(prompt)?;
    let field = |x: &Tensor<f32>, t: f64| clip_velocity(model, lora, cond, x, t, prompt);
    let x0 = sampler_noise(cond.tokens().shape(), sampler.seed);
    let x = integrate(&field, x0, sampler.steps)?;
    cond.with_tokens(x)
}

/// Full clip-to-clip edit.
pub fn edit_clip(
    model: &DiT<f32>,
    lora: Option<&LoraSet<f32>>,
    clip: &VideoClip,
    sampler: &SamplerConfig,
    prompt: &str,
) -> Result<VideoClip> {
    let cond = encode_latent(clip, model.config.patch)?;
    from_latent(&sample_edit(model, lora, &cond, sampler, prompt)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn path_endpoints_and_scalar_example() {
        let mut rng = substream(0, "t", &[]);
        let x1 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let x0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let s0 = make_sample_at(x1.clone(), x1.clone(), x0.clone(), 0.0).unwrap();
        assert_eq!(s0.xt, x0);
        let s1 = make_sample_at(x1.clone(), x1.clone(), x0.clone(), 1.0).unwrap();
        assert_eq!(s1.xt, x1);
        let s = make_sample_at(t64(&[0.0]), t64(&[2.0]), t64(&[0.0]), 0.5).unwrap();
        assert_eq!(s.xt.data(), &[1.0]);
        assert_eq!(s.vt.data(), &[2.0]);
    }

    #[test]
    fn random_samples_satisfy_the_path() {
        let mut rng = substream(1, "t", &[]);
        for _ in 0..20 {
            let x1 = Tensor::<f32>::randn(&[2, 5], 1.0, &mut rng);
            let s = make_sample(x1.clone(), x1.clone(), &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&s.t));
            for i in 0..10 {
                let (a, b) = (s.x1_gen.data()[i], s.x0.data()[i]);
                assert_eq!(s.xt.data()[i], s.t as f32 * a + (1.0 - s.t) as f32 * b);
                assert_eq!(s.vt.data()[i], a - b);
            }
        }
        assert!(make_sample(t64(&[1.0]), t64(&[1.0, 2.0]), &mut rng).is_err());
    }

    struct Stub(f64);

    impl FlowModel<f64> for Stub {
        fn predict(&self, g: &mut Graph<f64>, s: &FlowSample<f64>, _: &str) -> Result<Var> {
            g.constant(s.vt.map(|v| v + self.0))
        }
    }

    #[test]
    fn stub_losses() {
        let mut rng = substream(2, "t", &[]);
        let x1 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let s = make_sample(x1.clone(), x1, &mut rng).unwrap();
        let mut g = Graph::new();
        let l = fm_loss(&mut g, &Stub(0.0), &s, "p").unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let l = fm_loss(&mut g, &Stub(1.0), &s, "p").unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn condition_values_have_no_target() {
        let mut rng = substream(3, "t", &[]);
        let x1 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let x0 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let a = make_sample_at(x1.clone(), x1.clone(), x0.clone(), 0.3).unwrap();
        let b = make_sample_at(x1.map(|v| v * 5.0 - 1.0), x1, x0, 0.3).unwrap();
        let mut g = Graph::new();
        let la = fm_loss(&mut g, &Stub(0.5), &a, "p").unwrap();
        let lb = fm_loss(&mut g, &Stub(0.5), &b, "p").unwrap();
        assert_eq!(g.value(la).data(), g.value(lb).data());
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let mut rng = substream(4, "t", &[]);
        let x0 = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let x1 = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        for n in [1, 2, 7, 32] {
            let x0c = x0.clone();
            let x1c = x1.clone();
            let field = move |_: &Tensor<f64>, _: f64| -> Result<Tensor<f64>> {
                let d = x1c.data().iter().zip(x0c.data()).map(|(a, b)| a - b).collect();
                Tensor::new(vec![3, 3], d)
            };
            let out = integrate(&field, x0.clone(), n).unwrap();
            assert!(out.max_abs_diff(&x1) < 1e-12, "N={n}");
        }
    }

    #[test]
    fn single_step_is_one_full_update() {
        let field = |x: &Tensor<f64>, t: f64| -> Result<Tensor<f64>> { Ok(x.map(|v| v * 2.0 + t)) };
        let out = integrate(&field, t64(&[1.0, -3.0]), 1).unwrap();
        assert_eq!(out.data(), &[3.0, -9.0]);
    }

    #[test]
    fn decay_field_approaches_exp_minus_one() {
        let field = |x: &Tensor<f64>, _: f64| -> Result<Tensor<f64>> { Ok(x.map(|v| -v)) };
        let x0 = t64(&[1.5, -0.5]);
        let out = integrate(&field, x0.clone(), 64).unwrap();
        for (o, s) in out.data().iter().zip(x0.data()) {
            assert!((o - s * (1.0f64 - 1.0 / 64.0).powi(64)).abs() < 1e-12);
            assert!((o / (s * (-1f64).exp()) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn blow_up_reports_step() {
        let field = |x: &Tensor<f64>, t: f64| -> Result<Tensor<f64>> {
            Ok(x.map(|v| if t >= 0.5 { v * f64::MAX } else { v }))
        };
        let err = integrate(&field, t64(&[10.0]), 4).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
        assert!(integrate(&field, t64(&[1.0]), 0).is_err());
    }

    #[test]
    fn latent_mapping_round_trips() {
        let data: Vec<f32> = (0..2 * 4 * 4 * 3).map(|i| (i % 7) as f32 / 6.0).collect();
        let clip = VideoClip::new(2, 4, 4, 3, (8, 1), data).unwrap();
        let g = encode_latent(&clip, PatchSpec::new(2, 2, 2)).unwrap();
        assert!(g.tokens().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = from_latent(&g).unwrap();
        assert!(back.data().iter().zip(clip.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
