use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: BTreeMap::new(),
            step: 0,
        }
    }

    /// Restores a previously saved state.
    pub fn from_state(config: AdamWConfig, step: u64, state: BTreeMap<String, Moments<S>>) -> Self {
        AdamW { config, state, step }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<S>> {
        &self.state
    }

    /// Applies one update with the configured learning rate.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// Applies one update to every parameter that has a gradient, using `lr`
    /// instead of the configured rate (for schedules).
    pub fn step_with_lr(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::non_finite(format!("gradient of parameter {name}")));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = S::of(c.beta1);
        let b2 = S::of(c.beta2);
        let one = S::one();
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let eps = S::of(c.eps);
        let lr_s = S::of(lr);
        let decay = S::of(1.0 - lr * c.weight_decay);

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, (pd, &gd)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (one - b1) * gd;
                v[i] = b2 * v[i] + (one - b2) * gd * gd;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pd = *pd * decay - lr_s * mhat / (vhat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::non_finite(format!("parameter {name} after AdamW step")));
            }
        }
        Ok(())
    }
}

/// Learning rate at a 0-based `step`: a linear ramp reaching `lr_max` after
/// `warmup` steps, constant afterwards.
pub fn warmup_lr(lr_max: f64, warmup: u64, step: u64) -> f64 {
    if step < warmup {
        lr_max * (step + 1) as f64 / warmup as f64
    } else {
        lr_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64, cfg: AdamWConfig) -> f64 {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::<f64>::scalar(value))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::<f64>::scalar(grad))]);
        let mut opt = AdamW::new(cfg);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(opt.step_count(), 1);
        params["w"].data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        assert_eq!(one_param(0.37, 0.0, cfg), 0.37);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let p = one_param(1.0, 1.0, cfg);
        assert!((p - 0.9).abs() < 1e-8, "{p}");
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let p = one_param(1.0, 0.0, cfg);
        assert!((p - 0.999).abs() < 1e-15, "{p}");
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut params = BTreeMap::from([(
            "w".to_string(),
            Tensor::<f32>::from_fn(&[3, 2], |i| 0.1 * i as f32 - 0.2),
        )]);
        let before = params.clone();
        let grads = BTreeMap::from([("w".to_string(), Tensor::<f32>::full(&[3, 2], 0.7))]);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step_with_lr(&mut params, &grads, 0.0).unwrap();
        }
        assert_eq!(opt.step_count(), 5);
        for (a, b) in params["w"].data().iter().zip(before["w"].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = BTreeMap::from([("blocks.0.q".to_string(), Tensor::<f64>::scalar(1.0))]);
        let grads = BTreeMap::from([("blocks.0.q".to_string(), Tensor::<f64>::scalar(f64::NAN))]);
        let err = AdamW::new(AdamWConfig::default())
            .step(&mut params, &grads)
            .unwrap_err();
        assert!(err.to_string().contains("blocks.0.q"), "{err}");
    }

    #[test]
    fn moments_track_parameter_shape() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[2, 5]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::<f64>::full(&[2, 5], 1.0))]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut params, &grads).unwrap();
        let st = &opt.moments()["w"];
        assert_eq!(st.m.shape(), &[2, 5]);
        assert_eq!(st.v.shape(), &[2, 5]);
    }

    #[test]
    fn warmup_ramps_then_holds() {
        assert_eq!(warmup_lr(1e-4, 50, 0), 1e-4 / 50.0);
        assert_eq!(warmup_lr(1e-4, 50, 24), 1e-4 * 25.0 / 50.0);
        assert_eq!(warmup_lr(1e-4, 50, 49), 1e-4);
        assert_eq!(warmup_lr(1e-4, 50, 50), 1e-4);
        assert_eq!(warmup_lr(1e-4, 50, 400), 1e-4);
        assert_eq!(warmup_lr(1e-4, 0, 0), 1e-4);
    }
}
