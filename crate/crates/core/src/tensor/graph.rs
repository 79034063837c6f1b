//! Operation recording and reverse-mode accumulation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so reverse index order is a valid topological order
//! for the backward sweep. Recorded values are never mutated.

use std::cell::{Ref, RefCell};

use super::{alloc_zeros, kernels, validation_enabled, Float, Indices, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        p: usize,
        q: usize,
        r: usize,
        batches: Vec<(usize, usize)>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        cin: usize,
        cout: usize,
    },
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    HeadDot {
        q: usize,
        k: usize,
        heads: usize,
    },
    PairHeadDot {
        x: usize,
        y: usize,
        heads: usize,
    },
    HeadSum {
        x: usize,
        heads: usize,
    },
    HeadMix {
        alpha: usize,
        v: usize,
        heads: usize,
    },
    ScatterMean {
        x: usize,
        idx: Vec<usize>,
        counts: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        rows: usize,
        probs: Vec<T>,
        targets: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations for one forward pass.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaves only.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Takes ownership of one leaf's gradient.
    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that only evaluates; nothing is retained for backward.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor as a leaf; it receives a gradient when its
    /// `requires_grad` flag is set.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// A differentiable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// A detached leaf.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<T>, grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            needs_grad: grad && self.record,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var<'_, T>> {
        if validation_enabled() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.record && inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            shape,
            data,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        if !root.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![T::one()]);
        let mut acc = Accumulator {
            grads: &mut grads,
            nodes: &nodes,
        };
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc.grads[id].take() else {
                continue;
            };
            backward_node(node, &g, &mut acc);
        }
        Ok(Gradients { grads })
    }
}

struct Accumulator<'a, T> {
    grads: &'a mut Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<T: Float> Accumulator<'_, T> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn data(&self, id: usize) -> &[T] {
        &self.nodes[id].data
    }

    /// Mutable gradient buffer for `id`, zero-initialised on first touch.
    fn buf(&mut self, id: usize) -> &mut Vec<T> {
        let len = self.nodes[id].data.len();
        self.grads[id].get_or_insert_with(|| alloc_zeros(len))
    }

    fn add(&mut self, id: usize, g: Vec<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(e) => e.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_slice(&mut self, id: usize, g: &[T]) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(e) => e.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn backward_node<T: Float>(node: &Node<T>, g: &[T], acc: &mut Accumulator<'_, T>) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add_slice(*a, g);
            acc.add_slice(*b, g);
        }
        Op::Sub(a, b) => {
            acc.add_slice(*a, g);
            if acc.wants(*b) {
                acc.add(*b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if acc.wants(*a) {
                let gb: Vec<T> = g.iter().zip(acc.data(*b)).map(|(&x, &y)| x * y).collect();
                acc.add(*a, gb);
            }
            if acc.wants(*b) {
                let ga: Vec<T> = g.iter().zip(acc.data(*a)).map(|(&x, &y)| x * y).collect();
                acc.add(*b, ga);
            }
        }
        Op::Scale(a, c) => {
            if acc.wants(*a) {
                acc.add(*a, g.iter().map(|&v| v * *c).collect());
            }
        }
        Op::Sum(a) => {
            if acc.wants(*a) {
                let n = acc.data(*a).len();
                acc.add(*a, vec![g[0]; n]);
            }
        }
        Op::Mean(a) => {
            if acc.wants(*a) {
                let n = acc.data(*a).len();
                acc.add(*a, vec![g[0] / T::of(n as f64); n]);
            }
        }
        Op::Reshape(a) => acc.add_slice(*a, g),
        Op::MatMul {
            a,
            b,
            p,
            q,
            r,
            batches,
        } => {
            let (p, q, r) = (*p, *q, *r);
            let (wa, wb) = (acc.wants(*a), acc.wants(*b));
            let mut da = wa.then(|| alloc_zeros::<T>(acc.data(*a).len()));
            let mut db = wb.then(|| alloc_zeros::<T>(acc.data(*b).len()));
            {
                let (ad, bd) = (acc.data(*a), acc.data(*b));
                for (t, &(oa, ob)) in batches.iter().enumerate() {
                    let gt = &g[t * p * r..(t + 1) * p * r];
                    if let Some(da) = da.as_mut() {
                        let bt = &bd[ob * q * r..(ob + 1) * q * r];
                        kernels::gemm_nt_acc(gt, bt, &mut da[oa * p * q..(oa + 1) * p * q], p, q, r);
                    }
                    if let Some(db) = db.as_mut() {
                        let at = &ad[oa * p * q..(oa + 1) * p * q];
                        kernels::gemm_tn_acc(at, gt, &mut db[ob * q * r..(ob + 1) * q * r], p, q, r);
                    }
                }
            }
            if let Some(da) = da {
                acc.add(*a, da);
            }
            if let Some(db) = db {
                acc.add(*b, db);
            }
        }
        Op::Linear { x, w, b, cin, cout } => {
            let rows = acc.data(*x).len() / cin;
            let need_db = b.map(|b| acc.wants(b)).unwrap_or(false);
            let (dx, dw, db) = kernels::linear_backward(
                acc.data(*x),
                acc.data(*w),
                g,
                rows,
                *cin,
                *cout,
                acc.wants(*x),
                acc.wants(*w),
                need_db,
            );
            if let Some(dx) = dx {
                acc.add(*x, dx);
            }
            if let Some(dw) = dw {
                acc.add(*w, dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                acc.add(*b, db);
            }
        }
        Op::Gelu(a) => {
            if acc.wants(*a) {
                let d: Vec<T> = g
                    .iter()
                    .zip(acc.data(*a))
                    .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                    .collect();
                acc.add(*a, d);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = acc.data(*gamma).len();
            let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, acc.data(*gamma), c);
            acc.add(*x, dx);
            acc.add(*gamma, dg);
            acc.add(*beta, db);
        }
        Op::Softmax(a) => {
            if acc.wants(*a) {
                let len = *node.shape.last().expect("softmax rank >= 1");
                let d = kernels::softmax_rows_backward(&node.data, g, len);
                acc.add(*a, d);
            }
        }
        Op::Gather { x, idx } => {
            if acc.wants(*x) {
                let c = *node.shape.last().expect("gather output rank >= 1");
                let buf = acc.buf(*x);
                for (j, &row) in idx.iter().enumerate() {
                    let src = &g[j * c..(j + 1) * c];
                    for (d, &v) in buf[row * c..(row + 1) * c].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        Op::MaxAxis { x, argmax } => {
            if acc.wants(*x) {
                let buf = acc.buf(*x);
                for (&src, &gv) in argmax.iter().zip(g) {
                    buf[src] += gv;
                }
            }
        }
        Op::HeadDot { q, k, heads } => {
            let (a_n, hn, k_n) = (node.shape[0], *heads, node.shape[2]);
            let c = acc.data(*q).len() / a_n;
            let d = c / hn;
            let (wq, wk) = (acc.wants(*q), acc.wants(*k));
            let mut dq = wq.then(|| alloc_zeros::<T>(a_n * c));
            let mut dk = wk.then(|| alloc_zeros::<T>(a_n * k_n * c));
            {
                let (qd, kd) = (acc.data(*q), acc.data(*k));
                for a in 0..a_n {
                    for h in 0..hn {
                        for kk in 0..k_n {
                            let gv = g[(a * hn + h) * k_n + kk];
                            let qo = a * c + h * d;
                            let ko = (a * k_n + kk) * c + h * d;
                            if let Some(dq) = dq.as_mut() {
                                for i in 0..d {
                                    dq[qo + i] += gv * kd[ko + i];
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                for i in 0..d {
                                    dk[ko + i] += gv * qd[qo + i];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dq) = dq {
                acc.add(*q, dq);
            }
            if let Some(dk) = dk {
                acc.add(*k, dk);
            }
        }
        Op::PairHeadDot { x, y, heads } => {
            let (a_n, hn, k_n) = (node.shape[0], *heads, node.shape[2]);
            let c = acc.data(*x).len() / (a_n * k_n);
            let d = c / hn;
            let (wx, wy) = (acc.wants(*x), acc.wants(*y));
            let n = a_n * k_n * c;
            let mut dx = wx.then(|| alloc_zeros::<T>(n));
            let mut dy = wy.then(|| alloc_zeros::<T>(n));
            {
                let (xd, yd) = (acc.data(*x), acc.data(*y));
                for a in 0..a_n {
                    for h in 0..hn {
                        for kk in 0..k_n {
                            let gv = g[(a * hn + h) * k_n + kk];
                            let o = (a * k_n + kk) * c + h * d;
                            if let Some(dx) = dx.as_mut() {
                                for i in 0..d {
                                    dx[o + i] += gv * yd[o + i];
                                }
                            }
                            if let Some(dy) = dy.as_mut() {
                                for i in 0..d {
                                    dy[o + i] += gv * xd[o + i];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                acc.add(*x, dx);
            }
            if let Some(dy) = dy {
                acc.add(*y, dy);
            }
        }
        Op::HeadSum { x, heads } => {
            if acc.wants(*x) {
                let (a_n, hn, k_n) = (node.shape[0], *heads, node.shape[2]);
                let c = acc.data(*x).len() / (a_n * k_n);
                let d = c / hn;
                let buf = acc.buf(*x);
                for a in 0..a_n {
                    for h in 0..hn {
                        for kk in 0..k_n {
                            let gv = g[(a * hn + h) * k_n + kk];
                            let o = (a * k_n + kk) * c + h * d;
                            buf[o..o + d].iter_mut().for_each(|v| *v += gv);
                        }
                    }
                }
            }
        }
        Op::HeadMix { alpha, v, heads } => {
            let (a_n, c) = (node.shape[0], node.shape[1]);
            let hn = *heads;
            let d = c / hn;
            let k_n = acc.data(*alpha).len() / (a_n * hn);
            let (wa, wv) = (acc.wants(*alpha), acc.wants(*v));
            let mut dalpha = wa.then(|| alloc_zeros::<T>(a_n * hn * k_n));
            let mut dv = wv.then(|| alloc_zeros::<T>(a_n * k_n * c));
            {
                let (ad, vd) = (acc.data(*alpha), acc.data(*v));
                for a in 0..a_n {
                    for h in 0..hn {
                        let go = &g[a * c + h * d..a * c + (h + 1) * d];
                        for kk in 0..k_n {
                            let ai = (a * hn + h) * k_n + kk;
                            let vo = (a * k_n + kk) * c + h * d;
                            if let Some(dal) = dalpha.as_mut() {
                                dal[ai] = go
                                    .iter()
                                    .zip(&vd[vo..vo + d])
                                    .fold(T::zero(), |s, (&x, &y)| s + x * y);
                            }
                            if let Some(dv) = dv.as_mut() {
                                let w = ad[ai];
                                for (dd, &gv) in dv[vo..vo + d].iter_mut().zip(go) {
                                    *dd += w * gv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(da) = dalpha {
                acc.add(*alpha, da);
            }
            if let Some(dv) = dv {
                acc.add(*v, dv);
            }
        }
        Op::ScatterMean { x, idx, counts } => {
            if acc.wants(*x) {
                let c = node.shape[1];
                let buf = acc.buf(*x);
                for (a, &n) in idx.iter().enumerate() {
                    let inv = T::one() / T::of(counts[n] as f64);
                    for i in 0..c {
                        buf[a * c + i] += g[n * c + i] * inv;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            rows,
            probs,
            targets,
        } => {
            if acc.wants(*logits) {
                let scale = g[0] / T::of(*rows as f64);
                let d: Vec<T> = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                acc.add(*logits, d);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn check_heads(op: &'static str, c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::contract(format!(
            "{op}: {heads} heads do not divide {c} channels"
        )));
    }
    Ok(())
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.node(self.id).data.len()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.graph.node(self.id).data.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let n = self.graph.node(self.id);
        Tensor::new(&n.shape, n.data.clone()).expect("recorded shapes are valid")
    }

    /// Single element of a scalar-like value.
    pub fn item(&self) -> T {
        self.graph.node(self.id).data[0]
    }

    fn same(&self, other: &Var<'g, T>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::contract("operands recorded on different graphs"));
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same(&other)?;
        let (shape, data) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            same_shape(name, &a.shape, &b.shape)?;
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data)
        };
        self.graph.push(name, shape, data, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: T) -> Result<Var<'g, T>> {
        let (shape, data) = {
            let a = self.graph.node(self.id);
            (a.shape.clone(), a.data.iter().map(|&v| v * c).collect())
        };
        self.graph
            .push("scale", shape, data, Op::Scale(self.id, c), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        let s = self.graph.node(self.id).data.iter().copied().sum::<T>();
        self.graph
            .push("sum", vec![], vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let s = {
            let a = self.graph.node(self.id);
            a.data.iter().copied().sum::<T>() / T::of(a.data.len() as f64)
        };
        self.graph
            .push("mean", vec![], vec![s], Op::Mean(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let data = {
            let a = self.graph.node(self.id);
            let n: usize = shape.iter().product();
            if n != a.data.len() {
                return Err(Error::Shape {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            a.data.clone()
        };
        self.graph
            .push("reshape", shape.to_vec(), data, Op::Reshape(self.id), &[self.id])
    }

    /// Batched matrix product `[..., P, Q] × [..., Q, R]` with broadcast
    /// leading extents.
    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same(&other)?;
        let (shape, data, p, q, r, batches) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            let mismatch = || Error::Shape {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            if a.shape.len() < 2 || b.shape.len() < 2 {
                return Err(mismatch());
            }
            let (ra, rb) = (a.shape.len(), b.shape.len());
            let (p, q) = (a.shape[ra - 2], a.shape[ra - 1]);
            let (q2, r) = (b.shape[rb - 2], b.shape[rb - 1]);
            if q != q2 {
                return Err(mismatch());
            }
            let ba = &a.shape[..ra - 2];
            let bb = &b.shape[..rb - 2];
            let nb = ba.len().max(bb.len());
            let ext = |s: &[usize], i: usize| -> usize {
                let off = nb - s.len();
                if i < off {
                    1
                } else {
                    s[i - off]
                }
            };
            let mut out_batch = Vec::with_capacity(nb);
            for i in 0..nb {
                let (ea, eb) = (ext(ba, i), ext(bb, i));
                if ea != eb && ea != 1 && eb != 1 {
                    return Err(mismatch());
                }
                out_batch.push(ea.max(eb));
            }
            let total: usize = out_batch.iter().product();
            let mut batches = Vec::with_capacity(total);
            for t in 0..total {
                let mut rem = t;
                let (mut oa, mut ob) = (0usize, 0usize);
                let (mut sa, mut sb) = (1usize, 1usize);
                for i in (0..nb).rev() {
                    let coord = rem % out_batch[i];
                    rem /= out_batch[i];
                    let (ea, eb) = (ext(ba, i), ext(bb, i));
                    if ea != 1 {
                        oa += coord * sa;
                    }
                    if eb != 1 {
                        ob += coord * sb;
                    }
                    sa *= ea;
                    sb *= eb;
                }
                batches.push((oa, ob));
            }
            let mut data = alloc_zeros(total * p * r);
            for (t, &(oa, ob)) in batches.iter().enumerate() {
                kernels::gemm_acc(
                    &a.data[oa * p * q..(oa + 1) * p * q],
                    &b.data[ob * q * r..(ob + 1) * q * r],
                    &mut data[t * p * r..(t + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
            let mut shape = out_batch;
            shape.extend([p, r]);
            (shape, data, p, q, r, batches)
        };
        self.graph.push(
            "matmul",
            shape,
            data,
            Op::MatMul {
                a: self.id,
                b: other.id,
                p,
                q,
                r,
                batches,
            },
            &[self.id, other.id],
        )
    }

    /// `x · W + b` over the last axis, `W` laid out `C_in × C_out`.
    pub fn linear(&self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        self.same(&w)?;
        if let Some(b) = &b {
            self.same(b)?;
        }
        let (shape, data, cin, cout) = {
            let x = self.graph.node(self.id);
            let wn = self.graph.node(w.id);
            let cin = *x.shape.last().unwrap_or(&0);
            if wn.shape.len() != 2 || wn.shape[0] != cin || x.shape.is_empty() {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: x.shape.clone(),
                    rhs: wn.shape.clone(),
                });
            }
            let cout = wn.shape[1];
            let bias = b.map(|b| self.graph.node(b.id));
            if let Some(bn) = &bias {
                if bn.shape != [cout] {
                    return Err(Error::Shape {
                        op: "linear bias",
                        lhs: wn.shape.clone(),
                        rhs: bn.shape.clone(),
                    });
                }
            }
            let rows = x.data.len() / cin;
            let data = kernels::linear_forward(
                &x.data,
                &wn.data,
                bias.as_ref().map(|b| b.data.as_slice()),
                rows,
                cin,
                cout,
            );
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("rank >= 1") = cout;
            (shape, data, cin, cout)
        };
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = &b {
            inputs.push(b.id);
        }
        self.graph.push(
            "linear",
            shape,
            data,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                cin,
                cout,
            },
            &inputs,
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'g, T>> {
        let (shape, data) = {
            let a = self.graph.node(self.id);
            (a.shape.clone(), a.data.iter().map(|&v| kernels::gelu(v)).collect())
        };
        self.graph
            .push("gelu", shape, data, Op::Gelu(self.id), &[self.id])
    }

    pub fn layer_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.same(&gamma)?;
        self.same(&beta)?;
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (shape, data, xhat, rstd) = {
            let x = self.graph.node(self.id);
            let g = self.graph.node(gamma.id);
            let b = self.graph.node(beta.id);
            let c = *x.shape.last().unwrap_or(&0);
            if g.shape != [c] || b.shape != [c] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: x.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let (y, xhat, rstd) = kernels::layer_norm_forward(&x.data, &g.data, &b.data, c, eps);
            (x.shape.clone(), y, xhat, rstd)
        };
        self.graph.push(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'g, T>> {
        let (shape, data) = {
            let a = self.graph.node(self.id);
            let len = *a
                .shape
                .last()
                .ok_or_else(|| Error::contract("softmax of a scalar"))?;
            (a.shape.clone(), kernels::softmax_rows(&a.data, len))
        };
        self.graph
            .push("softmax", shape, data, Op::Softmax(self.id), &[self.id])
    }

    /// `out[i..., :] = x[idx[i...], :]` for `x` of shape `[N, C]`.
    pub fn gather_rows(&self, idx: &Indices) -> Result<Var<'g, T>> {
        let (shape, data) = {
            let x = self.graph.node(self.id);
            if x.shape.len() != 2 {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: x.shape.clone(),
                    rhs: idx.shape().to_vec(),
                });
            }
            let (n, c) = (x.shape[0], x.shape[1]);
            let mut data = alloc_zeros(idx.len() * c);
            for (j, &row) in idx.data().iter().enumerate() {
                if row >= n {
                    return Err(Error::Index {
                        index: row,
                        extent: n,
                    });
                }
                data[j * c..(j + 1) * c].copy_from_slice(&x.data[row * c..(row + 1) * c]);
            }
            let mut shape = idx.shape().to_vec();
            shape.push(c);
            (shape, data)
        };
        self.graph.push(
            "gather_rows",
            shape,
            data,
            Op::Gather {
                x: self.id,
                idx: idx.data().to_vec(),
            },
            &[self.id],
        )
    }

    /// Max over the middle axis of `[M, K, C]`; gradient goes to the first
    /// maximal element.
    pub fn reduce_max_axis(&self) -> Result<Var<'g, T>> {
        let (shape, data, argmax) = {
            let x = self.graph.node(self.id);
            if x.shape.len() != 3 {
                return Err(Error::Shape {
                    op: "reduce_max_axis",
                    lhs: x.shape.clone(),
                    rhs: vec![],
                });
            }
            let (m, k, c) = (x.shape[0], x.shape[1], x.shape[2]);
            let mut data = alloc_zeros(m * c);
            let mut argmax = vec![0usize; m * c];
            for mi in 0..m {
                for ci in 0..c {
                    let mut best = mi * k * c + ci;
                    for ki in 1..k {
                        let at = (mi * k + ki) * c + ci;
                        if x.data[at] > x.data[best] {
                            best = at;
                        }
                    }
                    data[mi * c + ci] = x.data[best];
                    argmax[mi * c + ci] = best;
                }
            }
            (vec![m, c], data, argmax)
        };
        self.graph.push(
            "reduce_max_axis",
            shape,
            data,
            Op::MaxAxis {
                x: self.id,
                argmax,
            },
            &[self.id],
        )
    }

    /// Per-head query/key dot products: `q [A, C]`, `keys [A, K, C]`
    /// → `[A, H, K]`.
    pub fn head_dot(&self, keys: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
        self.same(&keys)?;
        let (shape, data) = {
            let q = self.graph.node(self.id);
            let k = self.graph.node(keys.id);
            if q.shape.len() != 2
                || k.shape.len() != 3
                || k.shape[0] != q.shape[0]
                || k.shape[2] != q.shape[1]
            {
                return Err(Error::Shape {
                    op: "head_dot",
                    lhs: q.shape.clone(),
                    rhs: k.shape.clone(),
                });
            }
            let (a_n, k_n, c) = (k.shape[0], k.shape[1], k.shape[2]);
            check_heads("head_dot", c, heads)?;
            let d = c / heads;
            let mut data = alloc_zeros(a_n * heads * k_n);
            for a in 0..a_n {
                for h in 0..heads {
                    let qr = &q.data[a * c + h * d..a * c + (h + 1) * d];
                    for kk in 0..k_n {
                        let o = (a * k_n + kk) * c + h * d;
                        data[(a * heads + h) * k_n + kk] = qr
                            .iter()
                            .zip(&k.data[o..o + d])
                            .fold(T::zero(), |s, (&x, &y)| s + x * y);
                    }
                }
            }
            (vec![a_n, heads, k_n], data)
        };
        self.graph.push(
            "head_dot",
            shape,
            data,
            Op::HeadDot {
                q: self.id,
                k: keys.id,
                heads,
            },
            &[self.id, keys.id],
        )
    }

    /// Per-pair per-head dot products of two `[A, K, C]` tensors → `[A, H, K]`.
    pub fn pair_head_dot(&self, other: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
        self.same(&other)?;
        let (shape, data) = {
            let x = self.graph.node(self.id);
            let y = self.graph.node(other.id);
            if x.shape.len() != 3 || x.shape != y.shape {
                return Err(Error::Shape {
                    op: "pair_head_dot",
                    lhs: x.shape.clone(),
                    rhs: y.shape.clone(),
                });
            }
            let (a_n, k_n, c) = (x.shape[0], x.shape[1], x.shape[2]);
            check_heads("pair_head_dot", c, heads)?;
            let d = c / heads;
            let mut data = alloc_zeros(a_n * heads * k_n);
            for a in 0..a_n {
                for kk in 0..k_n {
                    for h in 0..heads {
                        let o = (a * k_n + kk) * c + h * d;
                        data[(a * heads + h) * k_n + kk] = x.data[o..o + d]
                            .iter()
                            .zip(&y.data[o..o + d])
                            .fold(T::zero(), |s, (&u, &v)| s + u * v);
                    }
                }
            }
            (vec![a_n, heads, k_n], data)
        };
        self.graph.push(
            "pair_head_dot",
            shape,
            data,
            Op::PairHeadDot {
                x: self.id,
                y: other.id,
                heads,
            },
            &[self.id, other.id],
        )
    }

    /// Per-head channel sums of `[A, K, C]` → `[A, H, K]`.
    pub fn head_sum(&self, heads: usize) -> Result<Var<'g, T>> {
        let (shape, data) = {
            let x = self.graph.node(self.id);
            if x.shape.len() != 3 {
                return Err(Error::Shape {
                    op: "head_sum",
                    lhs: x.shape.clone(),
                    rhs: vec![],
                });
            }
            let (a_n, k_n, c) = (x.shape[0], x.shape[1], x.shape[2]);
            check_heads("head_sum", c, heads)?;
            let d = c / heads;
            let mut data = alloc_zeros(a_n * heads * k_n);
            for a in 0..a_n {
                for kk in 0..k_n {
                    for h in 0..heads {
                        let o = (a * k_n + kk) * c + h * d;
                        data[(a * heads + h) * k_n + kk] = x.data[o..o + d].iter().copied().sum();
                    }
                }
            }
            (vec![a_n, heads, k_n], data)
        };
        self.graph.push(
            "head_sum",
            shape,
            data,
            Op::HeadSum { x: self.id, heads },
            &[self.id],
        )
    }

    /// Attention readout: weights `[A, H, K]` (self) applied to values
    /// `[A, K, C]` per head → `[A, C]`.
    pub fn head_mix(&self, values: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
        self.same(&values)?;
        let (shape, data) = {
            let w = self.graph.node(self.id);
            let v = self.graph.node(values.id);
            if w.shape.len() != 3
                || v.shape.len() != 3
                || w.shape[0] != v.shape[0]
                || w.shape[1] != heads
                || w.shape[2] != v.shape[1]
            {
                return Err(Error::Shape {
                    op: "head_mix",
                    lhs: w.shape.clone(),
                    rhs: v.shape.clone(),
                });
            }
            let (a_n, k_n, c) = (v.shape[0], v.shape[1], v.shape[2]);
            check_heads("head_mix", c, heads)?;
            let d = c / heads;
            let mut data = alloc_zeros(a_n * c);
            for a in 0..a_n {
                for h in 0..heads {
                    let out = &mut data[a * c + h * d..a * c + (h + 1) * d];
                    for kk in 0..k_n {
                        let wv = w.data[(a * heads + h) * k_n + kk];
                        let o = (a * k_n + kk) * c + h * d;
                        for (y, &x) in out.iter_mut().zip(&v.data[o..o + d]) {
                            *y += wv * x;
                        }
                    }
                }
            }
            (vec![a_n, c], data)
        };
        self.graph.push(
            "head_mix",
            shape,
            data,
            Op::HeadMix {
                alpha: self.id,
                v: values.id,
                heads,
            },
            &[self.id, values.id],
        )
    }

    /// Row-wise mean of `[A, C]` into `n` buckets given by `idx`; empty
    /// buckets are zero.
    pub fn scatter_mean(&self, idx: &[usize], n: usize) -> Result<Var<'g, T>> {
        let (shape, data, counts) = {
            let x = self.graph.node(self.id);
            if x.shape.len() != 2 || x.shape[0] != idx.len() {
                return Err(Error::Shape {
                    op: "scatter_mean",
                    lhs: x.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let c = x.shape[1];
            let mut counts = vec![0usize; n];
            let mut data = alloc_zeros(n * c);
            for (a, &t) in idx.iter().enumerate() {
                if t >= n {
                    return Err(Error::Index {
                        index: t,
                        extent: n,
                    });
                }
                counts[t] += 1;
                for i in 0..c {
                    data[t * c + i] += x.data[a * c + i];
                }
            }
            for (t, &cnt) in counts.iter().enumerate() {
                if cnt > 1 {
                    let inv = T::one() / T::of(cnt as f64);
                    data[t * c..(t + 1) * c].iter_mut().for_each(|v| *v *= inv);
                }
            }
            (vec![n, c], data, counts)
        };
        self.graph.push(
            "scatter_mean",
            shape,
            data,
            Op::ScatterMean {
                x: self.id,
                idx: idx.to_vec(),
                counts,
            },
            &[self.id],
        )
    }

    /// Mean over rows of `[B, U]` logits of the cross-entropy against
    /// `(1 − ε)·onehot + ε/U`.
    pub fn cross_entropy(&self, labels: &[usize], smoothing: T) -> Result<Var<'g, T>> {
        let (loss, probs, targets) = {
            let x = self.graph.node(self.id);
            if x.shape.len() != 2 || x.shape[0] != labels.len() {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: x.shape.clone(),
                    rhs: vec![labels.len()],
                });
            }
            if smoothing < T::zero() || smoothing >= T::one() {
                return Err(Error::contract("label smoothing must lie in [0, 1)"));
            }
            let (b, u) = (x.shape[0], x.shape[1]);
            let probs = kernels::softmax_rows(&x.data, u);
            let off = smoothing / T::of(u as f64);
            let mut targets = vec![off; b * u];
            let mut loss = T::zero();
            for (r, &lab) in labels.iter().enumerate() {
                if lab >= u {
                    return Err(Error::Index {
                        index: lab,
                        extent: u,
                    });
                }
                targets[r * u + lab] += T::one() - smoothing;
                let xr = &x.data[r * u..(r + 1) * u];
                let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                for i in 0..u {
                    loss -= targets[r * u + i] * (xr[i] - lse);
                }
            }
            (loss / T::of(b as f64), probs, targets)
        };
        self.graph.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                rows: labels.len(),
                probs,
                targets,
            },
            &[self.id],
        )
    }
}
