//! Eager reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its value and parent links, so node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Parameters enter the graph through [`Graph::param`]; after a backward
//! pass, [`Gradients::accumulate_into`] adds their gradients into the
//! owning [`ParamStore`]. Gradient buffers therefore belong to the graph
//! and are merged into the store explicitly.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{matmul_raw, mm_bt, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a[n×c] + b[c]` broadcast over rows
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    Mse(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Reshape(NodeId),
    Copy(NodeId),
    Dropout(NodeId, Vec<f64>),
    Sum(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf(None), false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf(None), requires_grad)
    }

    /// Binds a stored parameter. Frozen parameters also require grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)), true)
    }

    fn dims2(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<((usize, usize), (usize, usize))> {
        let (va, vb) = (self.value(a), self.value(b));
        let err = || Error::Dimension {
            op,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        Ok((va.dims2().ok_or_else(err)?, vb.dims2().ok_or_else(err)?))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((m, k), (k2, n)) = self.dims2("matmul", a, b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the batched linear map `x Wᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((m, k), (n, k2)) = self.dims2("matmul_t", a, b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let data = mm_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulT(a, b), rg))
    }

    /// Elementwise sum; a rank-1 `b` matching the trailing dimension of `a`
    /// is broadcast over rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        if va.shape() == vb.shape() {
            let v = va.add(vb)?;
            return Ok(self.push(v, Op::Add(a, b), rg));
        }
        let c = *va.shape().last().unwrap_or(&0);
        if vb.shape() == [c] {
            let mut out = va.clone();
            for row in out.data_mut().chunks_mut(c) {
                row.iter_mut().zip(vb.data()).for_each(|(o, v)| *o += v);
            }
            return Ok(self.push(out, Op::AddRow(a, b), rg));
        }
        Err(self.shape_err("add", a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let v = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn copy(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x, Op::Copy(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let c = *va.shape().last().unwrap_or(&1);
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(self.shape_err("mse", pred, target));
        }
        let n = vp.len().max(1) as f64;
        let s: f64 = vp.data().iter().zip(vt.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[n×c]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (n, c) = vl.dims2().ok_or_else(|| Error::Dimension {
            op: "cross_entropy",
            lhs: vl.shape().to_vec(),
            rhs: vec![labels.len()],
        })?;
        if n != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = vl.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n.max(1) as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(self.shape_err("concat", first, first));
        }
        let outer: usize = base[..axis].iter().product();
        let mut axis_len = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(self.shape_err("concat", first, p));
            }
            axis_len += s[axis];
        }
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape).map_err(|_| Error::Dimension {
            op: "reshape",
            lhs: self.value(a).shape().to_vec(),
            rhs: vec![],
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Inverted dropout with keep-probability `1 − rate`. A zero rate
    /// returns `a` unchanged without recording a node.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Dropout(a, mask), rg))
    }

    /// Sum of same-shape tensors.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("sum of zero tensors".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            acc = acc.add(self.value(p)).map_err(|_| self.shape_err("sum", first, p))?;
        }
        let rg = self.rg(parts);
        Ok(self.push(acc, Op::Sum(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`. Returns per-node gradients for
    /// every node that requires grad and is reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shape = |id: NodeId| self.nodes[id.0].value.shape();
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                // dA = G Bᵀ, dB = Aᵀ G
                send(*a, mm_bt(g, val(*b), m, n, k));
                send(*b, mm_at(val(*a), g, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[0];
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                send(*a, matmul_raw(g, val(*b), m, n, k));
                send(*b, mm_at(g, val(*a), m, n, k));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow(a, b) => {
                send(*a, g.to_vec());
                let c = shape(*b)[0];
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*b, db);
            }
            Op::Mul(a, b) => {
                send(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu(a) => send(
                *a,
                g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad_scalar(x)).collect(),
            ),
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                send(*a, da);
            }
            Op::Mse(p, t) => {
                let n = val(*p).len().max(1) as f64;
                let k = 2.0 * g[0] / n;
                let d: Vec<f64> = val(*p).iter().zip(val(*t)).map(|(p, t)| k * (p - t)).collect();
                send(*t, d.iter().map(|v| -v).collect());
                send(*p, d);
            }
            Op::CrossEntropy(logits, labels) => {
                let c = shape(*logits)[1];
                let n = labels.len().max(1) as f64;
                let mut d = val(*logits).to_vec();
                for (row, &l) in d.chunks_mut(c).zip(labels) {
                    softmax_in_place(row);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / n);
                }
                send(*logits, d);
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = shape(p)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let s = o * row + offset;
                        d.extend_from_slice(&g[s..s + chunk]);
                    }
                    offset += chunk;
                    send(p, d);
                }
            }
            Op::Reshape(a) | Op::Copy(a) => send(*a, g.to_vec()),
            Op::Dropout(a, mask) => send(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Sum(parts) => {
                for &p in parts {
                    send(p, g.to_vec());
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// `a[m×k]ᵀ · b[m×n]`
fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(br).for_each(|(o, v)| *o += av * v);
        }
    }
    out
}

/// Per-node gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-leaf gradient into `store`.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let (Op::Leaf(Some(pid)), Some(g)) = (&graph.nodes[i].op, g) {
                store.accumulate_grad(*pid, g);
            }
        }
    }
}
