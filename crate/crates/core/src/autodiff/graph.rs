//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation eagerly
//! computes its value, checks it for non-finite entries and records enough
//! context to run its vector-Jacobian product later.

use std::sync::Arc;

use super::tensor::{numel_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attend-allowed matrix consumed by [`Graph::softmax_lastdim`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows * cols != allowed.len() {
            return Err(Error::shape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(BoolMask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        BoolMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.cols..(row + 1) * self.cols]
    }

    pub fn count_false(&self) -> usize {
        self.allowed.iter().filter(|a| !**a).count()
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    record: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::of(0.797_884_560_802_865_4);
    let k = S::of(0.044_715);
    let k3 = S::of(3.0 * 0.044_715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    // tanh through exp is several times faster than the libm call
    let two = S::of(2.0);
    let t = S::one() - two / ((two * u).exp() + S::one());
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + k3 * x * x);
    (y, dy)
}

fn slot<'g, S: Scalar>(grads: &'g mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> &'g mut Vec<S> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that only evaluates; no node requires a gradient.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::non_finite(format!("{name} produced a non-finite value")));
        }
        let (op, requires_grad) = if self.record && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input (never differentiated).
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf (gradient available after backward when recording).
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = S::of(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = S::of(s);
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    fn check_trailing(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let d = *sa.last().unwrap();
        if sb.len() != 1 || sb[0] != d {
            return Err(Error::shape(format!(
                "{what}: operand {sb:?} must be a vector matching the last extent of {sa:?}"
            )));
        }
        Ok(d)
    }

    /// `a + b` with `b` a vector broadcast along the last axis of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.check_trailing(a, b, "add_broadcast")?;
        let vb = self.value(b).data();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % d])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddBroadcast(a, b), rg, "add_broadcast")
    }

    /// `a * b` with `b` a vector broadcast along the last axis of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.check_trailing(a, b, "mul_broadcast")?;
        let vb = self.value(b).data();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb[i % d])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MulBroadcast(a, b), rg, "mul_broadcast")
    }

    /// Matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with the right operand transposed: `a[m x k] * b[n x k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || {
            Error::shape(format!(
                "matmul{}: incompatible shapes {sa:?} and {sb:?}",
                if trans_b { "_t" } else { "" }
            ))
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(bad());
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if trans_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![S::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: views are within the row-major buffers described by sa, sb and (m, n).
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                rsb,
                csb,
                S::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b }, rg, "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() < 2 {
            return Err(Error::shape(format!("transpose needs rank >= 2, got {:?}", va.shape())));
        }
        let (batch, rows, cols) = va.as_batched_matrix();
        let src = va.data();
        let mut data = vec![S::zero(); src.len()];
        for bi in 0..batch {
            let base = bi * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    data[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let mut shape = va.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} is incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) along axis {axis} is out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * ext + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Slice { input: a, axis, start }, rg, "slice")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg, "silu")
    }

    /// Softmax over the last axis. Masked positions get exactly zero weight and
    /// do not take part in the max used for stabilisation.
    pub fn softmax_lastdim(&mut self, a: Var, mask: Option<&Arc<BoolMask>>) -> Result<Var> {
        let va = self.value(a);
        let (batch, rows, cols) = va.as_batched_matrix();
        if let Some(m) = mask {
            if m.rows != rows || m.cols != cols {
                return Err(Error::shape(format!(
                    "mask {}x{} does not match the last two extents of {:?}",
                    m.rows,
                    m.cols,
                    va.shape()
                )));
            }
        }
        let src = va.data();
        let mut data = vec![S::zero(); src.len()];
        for bi in 0..batch {
            for r in 0..rows {
                let off = (bi * rows + r) * cols;
                let x = &src[off..off + cols];
                let y = &mut data[off..off + cols];
                let allowed = mask.map(|m| m.row(r));
                let ok = |j: usize| allowed.is_none_or(|row| row[j]);
                let mut max = S::neg_infinity();
                for (j, &xj) in x.iter().enumerate() {
                    if ok(j) && xj > max {
                        max = xj;
                    }
                }
                if max == S::neg_infinity() {
                    return Err(Error::invalid(format!(
                        "softmax row {r} is fully masked (no position may be attended)"
                    )));
                }
                let mut sum = S::zero();
                for j in 0..cols {
                    if ok(j) {
                        let e = (x[j] - max).exp();
                        y[j] = e;
                        sum += e;
                    }
                }
                let inv = S::one() / sum;
                for yj in y.iter_mut() {
                    *yj *= inv;
                }
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Normalises the last axis to zero mean and unit variance, then applies the
    /// optional per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        for p in [gain, bias].into_iter().flatten() {
            let sp = self.shape(p);
            if sp.len() != 1 || sp[0] != d {
                return Err(Error::shape(format!(
                    "layer_norm: affine parameter {sp:?} must have length {d}"
                )));
            }
        }
        let rows = vx.numel() / d;
        let eps = S::of(eps);
        let dn = S::of(d as f64);
        let src = vx.data();
        let mut xhat = vec![S::zero(); src.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            // two-pass mean: exact for constant rows
            let mu0 = row.iter().copied().sum::<S>() / dn;
            let mu = mu0 + row.iter().map(|&v| v - mu0).sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
        }
        let g = gain.map(|g| self.value(g).data());
        let b = bias.map(|b| self.value(b).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % d;
                let y = g.map_or(h, |g| h * g[j]);
                b.map_or(y, |b| y + b[j])
            })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let op = if self.record && rg {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        self.push(out, op, rg, "layer_norm")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<S>() / S::of(v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            / S::of(va.len() as f64);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s), Op::Mse(a, b), rg, "mse")
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            });
        }
        for (i, g) in out.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::non_finite(format!("gradient of node {i} is not finite")));
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! buf {
            ($v:expr) => {
                slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        for (o, &x) in buf!(v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    for (o, &x) in buf!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs(*b) {
                    for (o, &x) in buf!(*b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    for ((o, &x), &y) in buf!(*a).iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    for ((o, &x), &y) in buf!(*b).iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    for (o, &x) in buf!(*a).iter_mut().zip(g) {
                        *o += x * *s;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if needs(*a) {
                    for (o, &x) in buf!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    for (o, &x) in buf!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs(*b) {
                    let gb = buf!(*b);
                    let d = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % d] += x;
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let vb = val(*b);
                let d = vb.len();
                if needs(*a) {
                    for (i, (o, &x)) in buf!(*a).iter_mut().zip(g).enumerate() {
                        *o += x * vb[i % d];
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let gb = buf!(*b);
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % d] += x * va[i];
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                if needs(*a) {
                    // dA[m,k] = dC[m,n] * (B^T or B)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let ga = buf!(*a);
                    // SAFETY: strided views stay within the buffers of the recorded shapes.
                    unsafe {
                        S::gemm(
                            m,
                            n,
                            k,
                            S::one(),
                            g.as_ptr(),
                            n as isize,
                            1,
                            val(*b).as_ptr(),
                            rsb,
                            csb,
                            S::one(),
                            ga.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if needs(*b) {
                    let gb = buf!(*b);
                    if *trans_b {
                        // dB[n,k] = dC^T[n,m] * A[m,k]
                        unsafe {
                            S::gemm(
                                n,
                                m,
                                k,
                                S::one(),
                                g.as_ptr(),
                                1,
                                n as isize,
                                val(*a).as_ptr(),
                                k as isize,
                                1,
                                S::one(),
                                gb.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    } else {
                        // dB[k,n] = A^T[k,m] * dC[m,n]
                        unsafe {
                            S::gemm(
                                k,
                                m,
                                n,
                                S::one(),
                                val(*a).as_ptr(),
                                1,
                                k as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                S::one(),
                                gb.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (batch, rows, cols) = self.nodes[a.0].value.as_batched_matrix();
                    let ga = buf!(*a);
                    for bi in 0..batch {
                        let base = bi * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[base + r * cols + c] += g[base + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.nodes[v.0].value.shape()[*axis];
                    if needs(v) {
                        let gv = buf!(v);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for (d, &s) in gv[dst..dst + ext * inner].iter_mut().zip(&g[src..src + ext * inner]) {
                                *d += s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { input, axis, start } => {
                if needs(*input) {
                    let in_shape = self.nodes[input.0].value.shape();
                    let (outer, ext, inner) = axis_split(in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let gi = buf!(*input);
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for (d, &s) in gi[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let va = val(*a);
                    for ((o, &x), &gv) in buf!(*a).iter_mut().zip(va).zip(g) {
                        *o += gv * gelu_parts(x).1;
                    }
                }
            }
            Op::Silu(a) => {
                if needs(*a) {
                    let va = val(*a);
                    for ((o, &x), &gv) in buf!(*a).iter_mut().zip(va).zip(g) {
                        let s = sigmoid(x);
                        *o += gv * s * (S::one() + x * (S::one() - s));
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().unwrap();
                    let ga = buf!(*a);
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum::<S>();
                        for ((o, &p), &q) in ga[r * cols..(r + 1) * cols].iter_mut().zip(ys).zip(gs) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let rows = xhat.len() / d;
                if let Some(b) = bias {
                    if needs(*b) {
                        let gb = buf!(*b);
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % d] += gv;
                        }
                    }
                }
                if let Some(gn) = gain {
                    if needs(*gn) {
                        let gg = buf!(*gn);
                        for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % d] += gv * h;
                        }
                    }
                }
                if needs(*x) {
                    let gain_v = gain.map(&val);
                    let gx = buf!(*x);
                    let dn = S::of(d as f64);
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gain_v.map_or(gr[j], |w| gr[j] * w[j]);
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() / dn;
                        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<S>() / dn;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    for o in buf!(*a).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let ga = buf!(*a);
                    let s = g[0] / S::of(ga.len() as f64);
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let va = val(*a);
                let vb = val(*b);
                let s = S::of(2.0) * g[0] / S::of(va.len() as f64);
                if needs(*a) {
                    for ((o, &x), &y) in buf!(*a).iter_mut().zip(va).zip(vb) {
                        *o += s * (x - y);
                    }
                }
                if needs(*b) {
                    for ((o, &x), &y) in buf!(*b).iter_mut().zip(va).zip(vb) {
                        *o -= s * (x - y);
                    }
                }
            }
        }
    }
}
