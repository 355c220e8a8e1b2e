//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants (features, frozen embeddings) or trainable inputs; gradients only
//! flow into nodes that have a trainable ancestor. The tape is discarded after
//! `backward`, and a fresh one is built for the next pass.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;

static CORRUPT_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Mutation switch used to prove the gradient checker catches a broken rule.
/// When set, the tanh derivative is computed as `1 - y` instead of `1 - y^2`.
#[doc(hidden)]
pub fn set_corrupt_backward(on: bool) {
    CORRUPT_BACKWARD.store(on, Ordering::SeqCst);
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    /// `[m, n] x [n] -> [m]`
    MatVec,
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`, elementwise with constant coefficients.
    Affine { scale: f64, shift: f64 },
    Tanh,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
    MeanOverAxis(usize),
    L2Normalize,
    /// Concatenates rank-0/rank-1 inputs into one rank-1 tensor.
    Concat,
    /// Contiguous range of a rank-1 tensor.
    Slice { start: usize, len: usize },
    Reshape(Vec<usize>),
    Sum,
    Dot,
    Cosine,
    /// `x[..., c] * w[...]`: scales every channel vector of `x` by one weight.
    ChannelScale,
    Relu,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatVec => "matvec",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise_mul",
            OpKind::Affine { .. } => "affine",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::MeanOverAxis(_) => "mean_over_axis",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Sum => "sum",
            OpKind::Dot => "dot",
            OpKind::Cosine => "cosine",
            OpKind::ChannelScale => "channel_scale",
            OpKind::Relu => "relu",
        }
    }
}

struct Node {
    kind: OpKind,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(kind: &OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let width = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Forward evaluation of one primitive, with shape validation.
fn forward(kind: &OpKind, xs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize| -> Result<()> {
        if xs.len() == n {
            Ok(())
        } else {
            Err(Error::Shape {
                op: kind.name(),
                lhs: vec![n],
                rhs: vec![xs.len()],
            })
        }
    };
    match kind {
        OpKind::Leaf => Err(Error::Config("leaf nodes are created with constant/param".into())),
        OpKind::MatVec => {
            arity(2)?;
            let (w, x) = (xs[0], xs[1]);
            if w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.len() {
                return Err(shape_err(kind, w, x));
            }
            let n = x.len();
            let out = w
                .data()
                .chunks(n)
                .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
                .collect();
            Ok(Tensor::from_parts(vec![w.shape()[0]], out))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Dot | OpKind::Cosine => {
            arity(2)?;
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(kind, a, b));
            }
            Ok(match kind {
                OpKind::Add => zip_map(a, b, |x, y| x + y),
                OpKind::Sub => zip_map(a, b, |x, y| x - y),
                OpKind::Mul => zip_map(a, b, |x, y| x * y),
                OpKind::Dot => Tensor::scalar(dot(a.data(), b.data())),
                _ => {
                    let (na, nb) = (a.norm(), b.norm());
                    if na < NORM_FLOOR || nb < NORM_FLOOR {
                        return Err(Error::DegenerateEmbedding);
                    }
                    let c = dot(a.data(), b.data()) / (na * nb);
                    Tensor::scalar(c.clamp(-1.0, 1.0))
                }
            })
        }
        OpKind::Affine { scale, shift } => {
            arity(1)?;
            Ok(map(xs[0], |x| scale * x + shift))
        }
        OpKind::Tanh => {
            arity(1)?;
            Ok(map(xs[0], f64::tanh))
        }
        OpKind::Sigmoid => {
            arity(1)?;
            Ok(map(xs[0], sigmoid))
        }
        OpKind::Relu => {
            arity(1)?;
            Ok(map(xs[0], |x| x.max(0.0)))
        }
        OpKind::Softmax => {
            arity(1)?;
            if xs[0].rank() == 0 {
                return Err(Error::EmptyAxis { op: "softmax" });
            }
            Ok(softmax_rows(xs[0]))
        }
        OpKind::MeanOverAxis(axis) => {
            arity(1)?;
            let x = xs[0];
            if *axis >= x.rank() {
                return Err(Error::Shape {
                    op: kind.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![*axis],
                });
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[base + i];
                    }
                }
            }
            for v in &mut out {
                *v /= n as f64;
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::L2Normalize => {
            arity(1)?;
            let n = xs[0].norm();
            if n < NORM_FLOOR {
                return Err(Error::DegenerateEmbedding);
            }
            Ok(map(xs[0], |x| x / n))
        }
        OpKind::Concat => {
            if xs.is_empty() {
                return Err(Error::EmptyAxis { op: "concat" });
            }
            let mut out = Vec::new();
            for x in xs {
                if x.rank() > 1 {
                    return Err(Error::Shape {
                        op: kind.name(),
                        lhs: x.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                out.extend_from_slice(x.data());
            }
            Ok(Tensor::from_parts(vec![out.len()], out))
        }
        OpKind::Slice { start, len } => {
            arity(1)?;
            let x = xs[0];
            if x.rank() != 1 || *len == 0 || start + len > x.len() {
                return Err(Error::Shape {
                    op: kind.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            Ok(Tensor::from_parts(
                vec![*len],
                x.data()[*start..start + len].to_vec(),
            ))
        }
        OpKind::Reshape(shape) => {
            arity(1)?;
            if shape.iter().product::<usize>() != xs[0].len() {
                return Err(Error::Shape {
                    op: kind.name(),
                    lhs: xs[0].shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(Tensor::from_parts(shape.clone(), xs[0].data().to_vec()))
        }
        OpKind::Sum => {
            arity(1)?;
            Ok(Tensor::scalar(xs[0].data().iter().sum()))
        }
        OpKind::ChannelScale => {
            arity(2)?;
            let (x, w) = (xs[0], xs[1]);
            if x.rank() < 1 || x.shape()[..x.rank() - 1] != *w.shape() {
                return Err(shape_err(kind, x, w));
            }
            let c = x.shape()[x.rank() - 1];
            let data = x
                .data()
                .chunks(c)
                .zip(w.data())
                .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<Var>, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(OpKind::Leaf, Vec::new(), t, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(OpKind::Leaf, Vec::new(), t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Applies a primitive to tape nodes, recording it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&kind, &xs)?
        };
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(kind, inputs.to_vec(), value, needs_grad))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.apply(OpKind::MatVec, &[w, x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(OpKind::Affine { scale, shift }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[x])
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MeanOverAxis(axis), &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::L2Normalize, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, xs)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 1 {
            return Err(shape_err(&OpKind::Cosine, self.value(a), self.value(b)));
        }
        self.apply(OpKind::Cosine, &[a, b])
    }

    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(OpKind::ChannelScale, &[x, w])
    }

    /// `W x + b`
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Element `i` of a rank-1 node as a scalar node.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice(x, i, 1)?;
        self.reshape(s, &[])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 || root.value.rank() > 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let corrupt = CORRUPT_BACKWARD.load(Ordering::Relaxed);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.vjp(node, &g, corrupt);
            for (input, dx) in node.inputs.iter().zip(contributions) {
                let Some(dx) = dx else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dx.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dx),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node with respect to each input.
    fn vjp(&self, node: &Node, g: &Tensor, corrupt: bool) -> Vec<Option<Tensor>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let y = &node.value;
        let ins = &node.inputs;
        match &node.kind {
            OpKind::Leaf => Vec::new(),
            OpKind::MatVec => {
                let (w, x) = (val(&ins[0]), val(&ins[1]));
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let dw = wants(&ins[0]).then(|| {
                    let mut d = Vec::with_capacity(m * n);
                    for &gi in g.data() {
                        d.extend(x.data().iter().map(|&xj| gi * xj));
                    }
                    Tensor::from_parts(vec![m, n], d)
                });
                let dx = wants(&ins[1]).then(|| {
                    let mut d = vec![0.0; n];
                    for (row, &gi) in w.data().chunks(n).zip(g.data()) {
                        for (dj, &wij) in d.iter_mut().zip(row) {
                            *dj += gi * wij;
                        }
                    }
                    Tensor::from_parts(vec![n], d)
                });
                vec![dw, dx]
            }
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), Some(map(g, |v| -v))],
            OpKind::Mul => {
                let (a, b) = (val(&ins[0]), val(&ins[1]));
                vec![
                    wants(&ins[0]).then(|| zip_map(g, b, |gi, bi| gi * bi)),
                    wants(&ins[1]).then(|| zip_map(g, a, |gi, ai| gi * ai)),
                ]
            }
            OpKind::Affine { scale, .. } => vec![Some(map(g, |v| v * scale))],
            OpKind::Tanh => {
                if corrupt {
                    vec![Some(zip_map(g, y, |gi, yi| gi * (1.0 - yi)))]
                } else {
                    vec![Some(zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi)))]
                }
            }
            OpKind::Sigmoid => vec![Some(zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi)))],
            OpKind::Relu => {
                let x = val(&ins[0]);
                vec![Some(zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
            }
            OpKind::Softmax => {
                let width = *y.shape().last().unwrap();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(width).zip(g.data().chunks(width)) {
                    let inner = dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - inner)));
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), d))]
            }
            OpKind::MeanOverAxis(axis) => {
                let x = val(&ins[0]);
                let (outer, n, inner) = axis_split(x.shape(), *axis);
                let mut d = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            d[(o * n + k) * inner + i] = g.data()[o * inner + i] / n as f64;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }
            OpKind::L2Normalize => {
                let norm = val(&ins[0]).norm();
                let yg = dot(y.data(), g.data());
                vec![Some(zip_map(g, y, |gi, yi| (gi - yi * yg) / norm))]
            }
            OpKind::Concat => {
                let mut offset = 0;
                ins.iter()
                    .map(|v| {
                        let x = val(v);
                        let part = g.data()[offset..offset + x.len()].to_vec();
                        offset += x.len();
                        Some(Tensor::from_parts(x.shape().to_vec(), part))
                    })
                    .collect()
            }
            OpKind::Slice { start, len } => {
                let x = val(&ins[0]);
                let mut d = vec![0.0; x.len()];
                d[*start..start + len].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }
            OpKind::Reshape(_) => {
                let x = val(&ins[0]);
                vec![Some(Tensor::from_parts(x.shape().to_vec(), g.data().to_vec()))]
            }
            OpKind::Sum => {
                let x = val(&ins[0]);
                vec![Some(Tensor::full(x.shape(), g.item()))]
            }
            OpKind::Dot => {
                let (a, b) = (val(&ins[0]), val(&ins[1]));
                let gs = g.item();
                vec![
                    wants(&ins[0]).then(|| map(b, |v| v * gs)),
                    wants(&ins[1]).then(|| map(a, |v| v * gs)),
                ]
            }
            OpKind::Cosine => {
                let (a, b) = (val(&ins[0]), val(&ins[1]));
                let (na, nb) = (a.norm(), b.norm());
                let c = dot(a.data(), b.data()) / (na * nb);
                let gs = g.item();
                let grad_of = |u: &Tensor, v: &Tensor, nu: f64| {
                    zip_map(u, v, |ui, vi| gs * (vi / (na * nb) - c * ui / (nu * nu)))
                };
                vec![
                    wants(&ins[0]).then(|| grad_of(a, b, na)),
                    wants(&ins[1]).then(|| grad_of(b, a, nb)),
                ]
            }
            OpKind::ChannelScale => {
                let (x, w) = (val(&ins[0]), val(&ins[1]));
                let c = x.shape()[x.rank() - 1];
                let dx = wants(&ins[0]).then(|| {
                    let d = g
                        .data()
                        .chunks(c)
                        .zip(w.data())
                        .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
                        .collect();
                    Tensor::from_parts(x.shape().to_vec(), d)
                });
                let dw = wants(&ins[1]).then(|| {
                    let d = g
                        .data()
                        .chunks(c)
                        .zip(x.data().chunks(c))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    Tensor::from_parts(w.shape().to_vec(), d)
                });
                vec![dx, dw]
            }
        }
    }
}
