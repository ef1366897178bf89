//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends one node to the shared [`Tape`]. Parents
//! always precede their children, so a single reverse sweep over the node list
//! propagates gradients in topological order.

use std::cell::RefCell;
use std::rc::Rc;

use super::broadcast::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape};
use super::Tensor;
use crate::error::{Error, Result};

/// Operation recorded for a tape node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    LinComb(Vec<f64>),
    MatMul,
    Sigmoid,
    Tanh,
    Abs,
    Softmax,
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Reshape,
    BroadcastTo,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Huber(f64),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::LinComb(_) => "lin_comb",
            OpKind::MatMul => "matmul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::Reshape => "reshape",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Huber(_) => "huber",
        }
    }
}

/// One recorded operation.
#[derive(Debug)]
pub struct TapeNode {
    pub op: OpKind,
    pub parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<TapeNode>,
    /// Accumulated gradients of leaf nodes, indexed like `nodes`.
    leaf_grads: Vec<Option<Tensor>>,
}

/// Append-only record of one forward pass. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.tape.inner.borrow();
        match inner.nodes.get(self.id) {
            Some(n) => write!(f, "Var#{}({}, {:?})", self.id, n.op.name(), n.value.shape()),
            None => write!(f, "Var#{}(detached)", self.id),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a leaf holding `value`. Gradients are only accumulated for leaves
    /// created with `requires_grad = true`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(TapeNode {
            op: OpKind::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
        });
        inner.leaf_grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation kind and parent ids of node `id`.
    pub fn node_info(&self, id: usize) -> Option<(OpKind, Vec<usize>)> {
        self.inner
            .borrow()
            .nodes
            .get(id)
            .map(|n| (n.op.clone(), n.parents.clone()))
    }

    /// Drops every node. Outstanding [`Var`]s become detached.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.leaf_grads.clear();
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().leaf_grads.iter_mut() {
            *g = None;
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: &Var) -> Option<Tensor> {
        if !Rc::ptr_eq(&self.inner, &var.tape.inner) {
            return None;
        }
        self.inner.borrow().leaf_grads.get(var.id).cloned().flatten()
    }

    fn check(&self, var: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &var.tape.inner) {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        if var.id >= self.inner.borrow().nodes.len() {
            return Err(Error::Tape(format!("variable #{} is detached", var.id)));
        }
        Ok(())
    }

    fn push(&self, op: OpKind, parents: Vec<usize>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = parents.iter().any(|&p| inner.nodes[p].requires_grad);
        inner.nodes.push(TapeNode {
            op,
            parents,
            value,
            requires_grad,
        });
        inner.leaf_grads.push(None);
        Ok(Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        })
    }

    /// Propagates d(root)/d(leaf) into every `requires_grad` leaf. Repeated
    /// calls accumulate.
    pub fn backward(&self, root: &Var) -> Result<()> {
        self.check(root)?;
        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, leaf_grads } = &mut *inner;
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::filled(root_node.value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.op == OpKind::Leaf {
                let slot = &mut leaf_grads[id];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.zip_with(&g, |a, b| a + b)?,
                    None => g,
                });
                continue;
            }
            let parent_grads = backward_rule(nodes, node, &g)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                grads[p] = Some(match grads[p].take() {
                    Some(prev) => prev.zip_with(&pg, |a, b| a + b)?,
                    None => pg,
                });
            }
        }
        Ok(())
    }
}

fn backward_rule(nodes: &[TapeNode], node: &TapeNode, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let pv = |i: usize| &nodes[node.parents[i]].value;
    let out = &node.value;
    let grads = match &node.op {
        OpKind::Leaf => Vec::new(),
        OpKind::Add => vec![
            Some(reduce_to_shape(g, pv(0).shape())),
            Some(reduce_to_shape(g, pv(1).shape())),
        ],
        OpKind::Sub => vec![
            Some(reduce_to_shape(g, pv(0).shape())),
            Some(reduce_to_shape(&g.map(|v| -v), pv(1).shape())),
        ],
        OpKind::Mul => {
            let (a, b) = (pv(0), pv(1));
            let ga = broadcast_binary(g, b, |x, y| x * y);
            let gb = broadcast_binary(g, a, |x, y| x * y);
            vec![
                Some(reduce_to_shape(&ga, a.shape())),
                Some(reduce_to_shape(&gb, b.shape())),
            ]
        }
        OpKind::Div => {
            let (a, b) = (pv(0), pv(1));
            let ga = broadcast_binary(g, b, |x, y| x / y);
            // d(a/b)/db = -out / b
            let gb = broadcast_binary(&g.zip_with(out, |x, o| -x * o)?, b, |x, y| x / y);
            vec![
                Some(reduce_to_shape(&ga, a.shape())),
                Some(reduce_to_shape(&gb, b.shape())),
            ]
        }
        OpKind::Scale(s) => vec![Some(g.map(|v| v * s))],
        OpKind::AddScalar(_) | OpKind::Reshape => {
            vec![Some(Tensor::raw(pv(0).shape().to_vec(), g.data().to_vec()))]
        }
        OpKind::LinComb(coeffs) => coeffs.iter().map(|&c| Some(g.map(|v| v * c))).collect(),
        OpKind::MatMul => {
            let (ga, gb) = matmul_backward(pv(0), pv(1), g);
            vec![Some(ga), Some(gb)]
        }
        OpKind::Sigmoid => vec![Some(g.zip_with(out, |x, y| x * y * (1.0 - y))?)],
        OpKind::Tanh => vec![Some(g.zip_with(out, |x, y| x * (1.0 - y * y))?)],
        OpKind::Abs => vec![Some(g.zip_with(pv(0), |x, a| x * sign(a))?)],
        OpKind::Softmax => {
            let last = *out.shape().last().unwrap();
            let mut d = vec![0.0; out.len()];
            for ((drow, yrow), grow) in d
                .chunks_mut(last)
                .zip(out.data().chunks(last))
                .zip(g.data().chunks(last))
            {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for ((dv, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *dv = y * (gv - dot);
                }
            }
            vec![Some(Tensor::raw(out.shape().to_vec(), d))]
        }
        OpKind::Sum => {
            let s = g.data()[0];
            vec![Some(Tensor::filled(pv(0).shape(), s))]
        }
        OpKind::Mean => {
            let a = pv(0);
            let s = g.data()[0] / a.len() as f64;
            vec![Some(Tensor::filled(a.shape(), s))]
        }
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
            let a = pv(0);
            let (outer, len, inner) = split_axis(a.shape(), *axis);
            let scale = if matches!(node.op, OpKind::MeanAxis(_)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; a.len()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        d[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(Tensor::raw(a.shape().to_vec(), d))]
        }
        OpKind::BroadcastTo => vec![Some(reduce_to_shape(g, pv(0).shape()))],
        OpKind::Concat(axis) => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            node.parents
                .iter()
                .map(|&p| {
                    let shape = nodes[p].value.shape();
                    let width = shape[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&g.data()[base..base + width]);
                    }
                    offset += width;
                    Some(Tensor::raw(shape.to_vec(), d))
                })
                .collect()
        }
        OpKind::Slice { axis, start } => {
            let a = pv(0);
            let (outer, len, inner) = split_axis(a.shape(), *axis);
            let width = out.shape()[*axis] * inner;
            let mut d = vec![0.0; a.len()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                d[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            vec![Some(Tensor::raw(a.shape().to_vec(), d))]
        }
        OpKind::Huber(delta) => {
            let delta = *delta;
            vec![Some(g.zip_with(pv(0), |x, r| {
                if r.abs() <= delta {
                    x * r
                } else {
                    x * delta * sign(r)
                }
            })?)]
        }
    };
    Ok(grads)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return Tensor::raw(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    // callers guarantee compatibility
    let out = broadcast_shape(a.shape(), b.shape()).expect("broadcast-compatible shapes");
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::raw(out, data)
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (ab, m, k) = match a {
        [m, k] => (None, *m, *k),
        [bt, m, k] => (Some(*bt), *m, *k),
        _ => return Err(err()),
    };
    let (bb, k2, n) = match b {
        [k, n] => (None, *k, *n),
        [bt, k, n] => (Some(*bt), *k, *n),
        _ => return Err(err()),
    };
    if k != k2 {
        return Err(err());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return Err(err()),
        (Some(x), _) | (_, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatMulDims {
        batch,
        m,
        k,
        n,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        gemm_nn(
            &a.data()[ao..ao + d.m * d.k],
            &b.data()[bo..bo + d.k * d.n],
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    let shape = if d.a_batched || d.b_batched {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Ok(Tensor::raw(shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = matmul_dims(a.shape(), b.shape()).expect("shapes validated in forward");
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        let gs = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        gemm_nt(gs, &b.data()[bo..bo + d.k * d.n], &mut ga[ao..ao + d.m * d.k], d.m, d.k, d.n);
        gemm_tn(&a.data()[ao..ao + d.m * d.k], gs, &mut gb[bo..bo + d.k * d.n], d.m, d.k, d.n);
    }
    (
        Tensor::raw(a.shape().to_vec(), ga),
        Tensor::raw(b.shape().to_vec(), gb),
    )
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
    let last = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(last).zip(x.data().chunks(last)) {
        let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::raw(x.shape().to_vec(), out)
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * r.abs() - 0.5 * delta * delta
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.with_value(Tensor::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    fn unary(&self, op: OpKind, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var> {
        self.tape.check(self)?;
        let value = self.with_value(f)?;
        self.tape.push(op, vec![self.id], value)
    }

    fn binary(
        &self,
        other: &Var,
        op: OpKind,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if broadcast_shape(a.shape(), b.shape()).is_none() {
                return Err(Error::Shape {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            broadcast_binary(a, b, f)
        };
        self.tape.push(op, vec![self.id, other.id], value)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, OpKind::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, OpKind::Sub, "sub", |a, b| a - b)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, OpKind::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, OpKind::Div, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        self.unary(OpKind::Scale(s), |t| Ok(t.map(|v| v * s)))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var> {
        self.unary(OpKind::AddScalar(s), |t| Ok(t.map(|v| v + s)))
    }

    /// `1 - self`
    pub fn one_minus(&self) -> Result<Var> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    /// Matrix product. Either side may carry a leading batch axis.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            matmul_forward(&inner.nodes[self.id].value, &inner.nodes[other.id].value)?
        };
        self.tape.push(OpKind::MatMul, vec![self.id, other.id], value)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(OpKind::Sigmoid, |t| Ok(t.map(sigmoid)))
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(OpKind::Tanh, |t| Ok(t.map(f64::tanh)))
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary(OpKind::Abs, |t| Ok(t.map(f64::abs)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        self.unary(OpKind::Softmax, |t| Ok(softmax_rows(t)))
    }

    pub fn sum(&self) -> Result<Var> {
        self.unary(OpKind::Sum, |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(&self) -> Result<Var> {
        self.unary(OpKind::Mean, |t| Ok(Tensor::scalar(t.sum() / t.len() as f64)))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var> {
        let op = if mean {
            OpKind::MeanAxis(axis)
        } else {
            OpKind::SumAxis(axis)
        };
        self.unary(op, |t| {
            if axis >= t.ndim() || t.ndim() < 2 {
                return Err(Error::invalid(format!(
                    "reduction axis {axis} invalid for shape {:?}",
                    t.shape()
                )));
            }
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[(o * len + l) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Ok(Tensor::raw(shape, out))
        })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        self.reduce_axis(axis, true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        self.unary(OpKind::Reshape, |t| t.clone().reshape(shape))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        self.unary(OpKind::BroadcastTo, |t| match broadcast_shape(t.shape(), shape) {
            Some(out) if out == shape => Ok(broadcast_binary(t, &Tensor::zeros(shape), |a, _| a)),
            _ => Err(Error::Shape {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            }),
        })
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(OpKind::Slice { axis, start }, |t| {
            if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
                return Err(Error::invalid(format!(
                    "slice {start}..{} on axis {axis} out of range for {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let (outer, full, inner) = split_axis(t.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Ok(Tensor::raw(shape, data))
        })
    }

    /// Element-wise Huber penalty of `self` treated as a residual.
    pub fn huber(&self, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(Error::invalid(format!("huber delta must be positive, got {delta}")));
        }
        self.unary(OpKind::Huber(delta), |t| Ok(t.map(|r| huber_value(r, delta))))
    }

    /// Σ cᵢ·vᵢ over operands of identical shape, recorded as a single node.
    pub fn lin_comb(terms: &[(f64, &Var)]) -> Result<Var> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::invalid("lin_comb of zero terms"))?;
        let tape = first.tape.clone();
        for (_, v) in terms {
            tape.check(v)?;
        }
        let value = {
            let inner = tape.inner.borrow();
            let shape = inner.nodes[first.id].value.shape().to_vec();
            let mut acc = vec![0.0; inner.nodes[first.id].value.len()];
            for (c, v) in terms {
                let t = &inner.nodes[v.id].value;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape {
                        op: "lin_comb",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    });
                }
                for (a, &x) in acc.iter_mut().zip(t.data()) {
                    *a += c * x;
                }
            }
            Tensor::raw(shape, acc)
        };
        tape.push(
            OpKind::LinComb(terms.iter().map(|(c, _)| *c).collect()),
            terms.iter().map(|(_, v)| v.id).collect(),
            value,
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape.clone();
        for v in parts {
            tape.check(v)?;
        }
        let value = {
            let inner = tape.inner.borrow();
            let base = inner.nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::invalid(format!("concat axis {axis} for shape {base:?}")));
            }
            let mut total = 0;
            for v in parts {
                let s = inner.nodes[v.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner_sz) = split_axis(&base, axis);
            let mut data = Vec::new();
            for o in 0..outer {
                for v in parts {
                    let t = &inner.nodes[v.id].value;
                    let w = t.shape()[axis] * inner_sz;
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::raw(shape, data)
        };
        tape.push(
            OpKind::Concat(axis),
            parts.iter().map(|v| v.id).collect(),
            value,
        )
    }
}
