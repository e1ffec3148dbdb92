//! Wengert-list reverse-mode differentiation.
//!
//! Every differentiable operation appends one node holding its output value.
//! `backward` sweeps the list from the loss node down to index 0, so each
//! recorded operation is visited at most once and strictly in reverse
//! execution order.

use super::conv;
use super::tensor::{Real, Tensor};
use crate::error::{GscError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward bugs used as mutation canaries for the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackwardSign,
}

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Log {
        x: Var,
        eps: E,
    },
    Exp(Var),
    Sqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    MulConst(Var, Tensor<E>),
    Softmax(Var),
    PoolMean {
        x: Var,
        axis: usize,
    },
    AvgPool2(Var),
    Sum(Var),
    Mean(Var),
    PickChannel {
        x: Var,
        index: Vec<Option<usize>>,
    },
    SumChannels(Var),
}

#[derive(Clone, Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
}

/// Result of a reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct BackwardReport {
    /// Non-leaf nodes whose adjoint was propagated, in visit order.
    pub visited: Vec<Var>,
}

#[derive(Debug, Default)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    fault: Option<Fault>,
}

/// Layout of an NCHW-like tensor around `axis`: (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map<E: Real>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<E>, kind: Op<E>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(GscError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GscError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let out = conv::forward(self.value(input), self.value(kernel), self.value(bias), pad)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            },
            &[input, kernel, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(E::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = E::of(eps);
        let out = self.value(x).map(|v| v.max(eps).ln());
        self.push("log", out, Op::Log { x, eps }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push("exp", out, Op::Exp(x), &[x])
    }

    /// Square root of a non-negative input; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < E::zero()) {
            return Err(GscError::contract("sqrt", "negative input"));
        }
        let out = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", out, Op::Sqrt(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = E::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant tensor that receives no gradient.
    pub fn mul_const(&mut self, x: Var, c: Tensor<E>) -> Result<Var> {
        if c.shape() != self.value(x).shape() {
            return Err(GscError::ShapeMismatch {
                op: "mul_const",
                expected: self.value(x).shape().to_vec(),
                got: c.shape().to_vec(),
            });
        }
        let out = zip_map(self.value(x), &c, |a, b| a * b);
        self.push("mul_const", out, Op::MulConst(x, c), &[x])
    }

    /// Softmax over axis 1 (the channel axis of NCHW data).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn pool_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || t.shape()[axis] == 0 {
            return Err(GscError::contract("pool_mean", format!("empty or missing axis {axis}")));
        }
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        let inv = E::one() / E::of(ext as f64);
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let src = &t.data()[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, data)?;
        self.push("pool_mean", out, Op::PoolMean { x, axis }, &[x])
    }

    /// 2x2 average pooling with stride 2 over the spatial axes; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(GscError::contract("avg_pool2", "spatial extent below 2"));
        }
        let quarter = E::of(0.25);
        let mut data = vec![E::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    data[(p * oh + y) * ow + xx] = s * quarter;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        self.push("avg_pool2", out, Op::AvgPool2(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(GscError::contract("sum", "empty reduction"));
        }
        let s: E = t.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(GscError::contract("mean", "empty reduction"));
        }
        let s: E = t.data().iter().copied().sum();
        let m = s / E::of(t.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Per-pixel channel selection: `[N,C,H,W] -> [N,1,H,W]`, zero where the index is `None`.
    pub fn pick_channel(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("pick_channel")?;
        let px = h * w;
        if index.len() != n * px {
            return Err(GscError::contract(
                "pick_channel",
                format!("{} indices for {} pixels", index.len(), n * px),
            ));
        }
        let mut data = vec![E::zero(); n * px];
        for (p, idx) in index.iter().enumerate() {
            if let Some(k) = *idx {
                if k >= c {
                    return Err(GscError::contract("pick_channel", format!("channel {k} >= {c}")));
                }
                let (b, q) = (p / px, p % px);
                data[p] = t.data()[(b * c + k) * px + q];
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], data)?;
        self.push("pick_channel", out, Op::PickChannel { x, index }, &[x])
    }

    /// `[N,C,H,W] -> [N,1,H,W]` channel sum.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("sum_channels")?;
        let px = h * w;
        let mut data = vec![E::zero(); n * px];
        for b in 0..n {
            for k in 0..c {
                let src = &t.data()[(b * c + k) * px..(b * c + k + 1) * px];
                for (d, &s) in data[b * px..(b + 1) * px].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], data)?;
        self.push("sum_channels", out, Op::SumChannels(x), &[x])
    }

    /// Reverse sweep from a single-element loss. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.value(loss).len() != 1 {
            return Err(GscError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut report = BackwardReport::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(report);
        }
        let mut adj: Vec<Option<Tensor<E>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), E::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.nodes[i].grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => self.nodes[i].grad = Some(g),
                }
                continue;
            }
            report.visited.push(Var(i));
            for (input, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match adj[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => adj[input.0] = Some(contrib),
                }
            }
        }
        Ok(report)
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor<E>) -> Result<Vec<(Var, Tensor<E>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            } => {
                let grads = conv::backward(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *pad,
                    g,
                    [rg(*input), rg(*kernel), rg(*bias)],
                )?;
                let mut v = Vec::new();
                if let Some(d) = grads.input {
                    v.push((*input, d));
                }
                if let Some(d) = grads.kernel {
                    v.push((*kernel, d));
                }
                if let Some(d) = grads.bias {
                    v.push((*bias, d));
                }
                v
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                vec![(*x, zip_map(xv, g, |a, d| if a > E::zero() { d } else { E::zero() }))]
            }
            Op::Sigmoid(x) => {
                let sign = if self.fault == Some(Fault::SigmoidBackwardSign) {
                    -E::one()
                } else {
                    E::one()
                };
                vec![(*x, zip_map(y, g, |s, d| sign * d * s * (E::one() - s)))]
            }
            Op::Log { x, eps } => {
                let xv = self.value(*x);
                let eps = *eps;
                vec![(*x, zip_map(xv, g, |a, d| if a > eps { d / a } else { E::zero() }))]
            }
            Op::Exp(x) => vec![(*x, zip_map(y, g, |e, d| d * e))],
            Op::Sqrt(x) => {
                let half = E::of(0.5);
                vec![(
                    *x,
                    zip_map(y, g, |r, d| if r > E::zero() { d * half / r } else { E::zero() }),
                )]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|d| -d))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, self.value(*b), |d, v| d * v)),
                (*b, zip_map(g, self.value(*a), |d, v| d * v)),
            ],
            Op::Scale(x, s) => {
                let s = *s;
                vec![(*x, g.map(|d| d * s))]
            }
            Op::MulConst(x, c) => vec![(*x, zip_map(g, c, |d, v| d * v))],
            Op::Softmax(x) => {
                let (outer, ext, inner) = split_axis(y.shape(), 1);
                let mut dx = vec![E::zero(); y.len()];
                for o in 0..outer {
                    let base = o * ext * inner;
                    for q in 0..inner {
                        let mut dot = E::zero();
                        for k in 0..ext {
                            let at = base + k * inner + q;
                            dot = dot + y.data()[at] * g.data()[at];
                        }
                        for k in 0..ext {
                            let at = base + k * inner + q;
                            dx[at] = y.data()[at] * (g.data()[at] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::PoolMean { x, axis } => {
                let xs = self.value(*x).shape();
                let (outer, ext, inner) = split_axis(xs, *axis);
                let inv = E::one() / E::of(ext as f64);
                let mut dx = vec![E::zero(); outer * ext * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..ext {
                        let dst = &mut dx[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                vec![(*x, Tensor::new(xs.to_vec(), dx)?)]
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = E::of(0.25);
                let mut dx = vec![E::zero(); n * c * h * w];
                for p in 0..n * c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let d = g.data()[(p * oh + yy) * ow + xx] * quarter;
                            let base = p * h * w;
                            dx[base + 2 * yy * w + 2 * xx] = d;
                            dx[base + 2 * yy * w + 2 * xx + 1] = d;
                            dx[base + (2 * yy + 1) * w + 2 * xx] = d;
                            dx[base + (2 * yy + 1) * w + 2 * xx + 1] = d;
                        }
                    }
                }
                vec![(*x, Tensor::new(xs.to_vec(), dx)?)]
            }
            Op::Sum(x) => {
                let d = g.item();
                vec![(*x, Tensor::full(self.value(*x).shape(), d))]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.item() / E::of(xv.len() as f64);
                vec![(*x, Tensor::full(xv.shape(), d))]
            }
            Op::PickChannel { x, index } => {
                let xs = self.value(*x).shape();
                let (c, px) = (xs[1], xs[2] * xs[3]);
                let mut dx = Tensor::zeros(xs);
                for (p, idx) in index.iter().enumerate() {
                    if let Some(k) = *idx {
                        let (b, q) = (p / px, p % px);
                        dx.data_mut()[(b * c + k) * px + q] = g.data()[p];
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumChannels(x) => {
                let xs = self.value(*x).shape();
                let (n, c, px) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = Tensor::zeros(xs);
                for b in 0..n {
                    let src = &g.data()[b * px..(b + 1) * px];
                    for k in 0..c {
                        dx.data_mut()[(b * c + k) * px..(b * c + k + 1) * px].copy_from_slice(src);
                    }
                }
                vec![(*x, dx)]
            }
        };
        Ok(out)
    }
}

#[inline]
pub fn sigmoid<E: Real>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

/// Max-shifted softmax over axis 1.
pub fn softmax_channels<E: Real>(t: &Tensor<E>) -> Result<Tensor<E>> {
    if t.shape().len() < 2 {
        return Err(GscError::contract("softmax", "need a channel axis"));
    }
    let (outer, ext, inner) = split_axis(t.shape(), 1);
    if ext == 0 {
        return Err(GscError::contract("softmax", "zero channels"));
    }
    let mut out = vec![E::zero(); t.len()];
    for o in 0..outer {
        let base = o * ext * inner;
        for q in 0..inner {
            let mut m = E::neg_infinity();
            for k in 0..ext {
                m = m.max(t.data()[base + k * inner + q]);
            }
            let mut z = E::zero();
            for k in 0..ext {
                let e = (t.data()[base + k * inner + q] - m).exp();
                out[base + k * inner + q] = e;
                z = z + e;
            }
            for k in 0..ext {
                let at = base + k * inner + q;
                out[at] = out[at] / z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
