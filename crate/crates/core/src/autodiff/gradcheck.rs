//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function, so it is independent
//! of the backward rules it is used to validate.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central differences of the scalar `f` with respect to every entry of every input.
pub fn numeric_gradient(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
    step: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Fixed pseudo-random projection weights so that every output element
/// contributes to the checked scalar.
fn projection(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n], |i| ((i as f64 + 1.0) * 0.618_033_988_7).fract() * 2.0 - 1.0)
}

/// Compares reverse-mode and finite-difference gradients of `build` applied to
/// `inputs`, returning one relative error per input.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    step: f64,
) -> Result<Vec<f64>> {
    let scalarize = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let out = build(g, vars)?;
        let n = g.value(out).numel();
        if n == 1 {
            return Ok(out);
        }
        let shape = g.shape(out).to_vec();
        let w = g.constant(projection(n).reshape(&shape)?)?;
        let p = g.mul(out, w)?;
        g.sum(p)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = scalarize(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let f = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars = xs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = scalarize(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let numeric = numeric_gradient(inputs, &f, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect())
}
