//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] sweeps
//! that record in reverse and accumulates gradients additively across fan-out.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddScalar { a: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Reshape { a: NodeId },
    Gather { a: NodeId, index: Rc<[usize]> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Sum { a: NodeId },
    SumLastAxis { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LogSoftmax { a: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Conv2d { x: NodeId, kernel: NodeId, stride: usize, padding: usize },
    Gelu { a: NodeId },
    Relu { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward computation.
///
/// Single-threaded by construction (interior mutability through `RefCell`).
/// Independent graphs may live on different threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
    tagged: RefCell<HashMap<usize, NodeId>>,
    pending: RefCell<Vec<(usize, Tensor)>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of the leaves that took part in a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf; gradients are tracked only if `requires_grad`.
    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.input(value, false)
    }

    /// A gradient-tracked leaf keyed by `tag`; repeated calls with the same
    /// tag return the same node, so shared parameters accumulate into one slot.
    pub fn tagged_leaf(&self, tag: usize, value: impl FnOnce() -> Tensor) -> Var<'_> {
        if let Some(&id) = self.tagged.borrow().get(&tag) {
            return Var { graph: self, id };
        }
        let v = self.input(value(), true);
        self.tagged.borrow_mut().insert(tag, v.id);
        v
    }

    /// All `(tag, node)` pairs, sorted by tag.
    pub fn tagged_leaves(&self) -> Vec<(usize, NodeId)> {
        let mut out: Vec<_> = self.tagged.borrow().iter().map(|(&t, &n)| (t, n)).collect();
        out.sort_unstable();
        out
    }

    /// Queues a side-effect value (e.g. a running-statistics update) that the
    /// owner of the tagged state applies after the forward pass.
    pub fn push_pending(&self, tag: usize, value: Tensor) {
        self.pending.borrow_mut().push((tag, value));
    }

    pub fn take_pending(&self) -> Vec<(usize, Tensor)> {
        std::mem::take(&mut *self.pending.borrow_mut())
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// A graph supports exactly one sweep; a second call is a state error so
    /// that stale gradients are never silently doubled.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.backward_done.get() {
            return Err(Error::State(
                "backward already ran on this graph; reset gradients and rebuild the graph".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients::default());
        }
        grads[loss.id] = Some(vec![1.0]);
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn softmax_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let out = node.value.shape();
            let sa = kernels::broadcast_strides(av.shape(), out);
            let sb = kernels::broadcast_strides(bv.shape(), out);
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::for_each_broadcast(out, &sa, &sb, |i, ia, ib| {
                    ga[ia] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[i],
                        BinaryKind::Mul => g[i] * bd[ib],
                        BinaryKind::Div => g[i] / bd[ib],
                    };
                });
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::for_each_broadcast(out, &sa, &sb, |i, ia, ib| {
                    gb[ib] += match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => -g[i],
                        BinaryKind::Mul => g[i] * ad[ia],
                        BinaryKind::Div => -g[i] * ad[ia] / (bd[ib] * bd[ib]),
                    };
                });
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi * factor);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi);
            }
        }
        Op::MatMul { a, b } => matmul_backward(nodes, *a, *b, g, grads),
        Op::Gather { a, index } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (&src, &gi) in index.iter().zip(g) {
                    ga[src] += gi;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out = node.value.shape();
            let outer: usize = out[..*axis].iter().product();
            let tail: usize = out[*axis + 1..].iter().product();
            let total = out[*axis] * tail;
            let mut offset = 0;
            for &inp in inputs {
                let chunk = nodes[inp].value.shape()[*axis] * tail;
                if let Some(gi) = slot(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        gi[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &s)| *x += s);
                    }
                }
                offset += chunk;
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumLastAxis { a } => {
            let last = *nodes[*a].value.shape().last().unwrap();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (row, &gi) in ga.chunks_exact_mut(last).zip(g) {
                    row.iter_mut().for_each(|x| *x += gi);
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = softmax_layout(node.value.shape(), *axis);
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let mut dot = 0.0;
                        for t in 0..len {
                            dot += g[base + t * inner] * y[base + t * inner];
                        }
                        for t in 0..len {
                            let k = base + t * inner;
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = softmax_layout(node.value.shape(), *axis);
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let mut total = 0.0;
                        for t in 0..len {
                            total += g[base + t * inner];
                        }
                        for t in 0..len {
                            let k = base + t * inner;
                            ga[k] += g[k] - y[k].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = nodes[*gamma].value.numel();
            let gam = nodes[*gamma].value.data().to_vec();
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        gg[k] += grow[k] * hrow[k];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for grow in g.chunks_exact(c) {
                    gb.iter_mut().zip(grow).for_each(|(x, &v)| *x += v);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; c];
                for (r, ((grow, hrow), xrow)) in
                    g.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(gx.chunks_exact_mut(c)).enumerate()
                {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for k in 0..c {
                        dxhat[k] = grow[k] * gam[k];
                        m1 += dxhat[k];
                        m2 += dxhat[k] * hrow[k];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for k in 0..c {
                        xrow[k] += rstd[r] * (dxhat[k] - m1 - hrow[k] * m2);
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let shape = nodes[*x].value.shape();
            let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let gam = nodes[*gamma].value.data().to_vec();
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    for k in base..base + plane {
                        sum_g[ch] += g[k];
                        sum_gh[ch] += g[k] * xhat[k];
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, *gamma) {
                gg.iter_mut().zip(&sum_gh).for_each(|(x, &v)| *x += v);
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(x, &v)| *x += v);
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let n = (b * plane) as f64;
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        let scale = gam[ch] * inv_std[ch];
                        for k in base..base + plane {
                            gx[k] += if *train {
                                scale * (g[k] - sum_g[ch] / n - xhat[k] * sum_gh[ch] / n)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, kernel, stride, padding } => {
            let xs = nodes[*x].value.shape().to_vec();
            let ks = nodes[*kernel].value.shape().to_vec();
            let os = node.value.shape();
            let geom = ConvGeom {
                c_in: xs[1],
                h: xs[2],
                w: xs[3],
                kh: ks[2],
                kw: ks[3],
                stride: *stride,
                padding: *padding,
                ho: os[2],
                wo: os[3],
            };
            let (rows, cols, c_out) = (geom.col_rows(), geom.col_cols(), ks[0]);
            let xd = nodes[*x].value.data();
            let kd = nodes[*kernel].value.data().to_vec();
            let in_plane = xs[1] * xs[2] * xs[3];
            let mut col = vec![0.0; rows * cols];
            let mut dcol = vec![0.0; rows * cols];
            let want_k = nodes[*kernel].requires_grad;
            let want_x = nodes[*x].requires_grad;
            for bi in 0..xs[0] {
                let gout = &g[bi * c_out * cols..(bi + 1) * c_out * cols];
                if want_k {
                    geom.im2col(&xd[bi * in_plane..(bi + 1) * in_plane], &mut col);
                    let gk = slot(grads, nodes, *kernel).unwrap();
                    kernels::gemm_nt(c_out, cols, rows, gout, &col, gk);
                }
                if want_x {
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(rows, c_out, cols, &kd, gout, &mut dcol);
                    let gx = slot(grads, nodes, *x).unwrap();
                    geom.col2im(&dcol, &mut gx[bi * in_plane..(bi + 1) * in_plane]);
                }
            }
        }
        Op::Gelu { a } => {
            let xd = nodes[*a].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(xd) {
                    *x += gi * gelu_grad(v);
                }
            }
        }
        Op::Relu { a } => {
            let xd = nodes[*a].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(xd) {
                    if v > 0.0 {
                        *x += gi;
                    }
                }
            }
        }
    }
}

struct MatMulLayout {
    m: usize,
    k: usize,
    n: usize,
    out_batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    /// `b` is a plain matrix shared by every batch entry of `a`.
    flat: bool,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<MatMulLayout> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim(format!("matmul needs rank >= 2, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim(format!("matmul inner extents differ: {a:?} x {b:?}")));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let out_batch = kernels::broadcast_shapes(ba, bb)
        .map_err(|_| Error::dim(format!("matmul batch dims incompatible: {a:?} x {b:?}")))?;
    let sa = kernels::broadcast_strides(ba, &out_batch).iter().map(|s| s * m * k).collect();
    let sb = kernels::broadcast_strides(bb, &out_batch).iter().map(|s| s * k * n).collect();
    Ok(MatMulLayout { m, k, n, out_batch, sa, sb, flat: bb.is_empty() })
}

fn matmul_backward(nodes: &[Node], a: NodeId, b: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    let lay = matmul_layout(av.shape(), bv.shape()).expect("validated in forward");
    let (m, k, n) = (lay.m, lay.k, lay.n);
    if lay.flat {
        let rows = av.numel() / k;
        if let Some(ga) = slot(grads, nodes, a) {
            kernels::gemm_nt(rows, n, k, g, bv.data(), ga);
        }
        if let Some(gb) = slot(grads, nodes, b) {
            kernels::gemm_tn(k, rows, n, av.data(), g, gb);
        }
        return;
    }
    let (ad, bd) = (av.data(), bv.data());
    if nodes[a].requires_grad {
        let ga = slot(grads, nodes, a).unwrap();
        kernels::for_each_broadcast(&lay.out_batch, &lay.sa, &lay.sb, |i, ia, ib| {
            kernels::gemm_nt(m, n, k, &g[i * m * n..(i + 1) * m * n], &bd[ib..ib + k * n], &mut ga[ia..ia + m * k]);
        });
    }
    if nodes[b].requires_grad {
        let gb = slot(grads, nodes, b).unwrap();
        kernels::for_each_broadcast(&lay.out_batch, &lay.sa, &lay.sb, |i, ia, ib| {
            kernels::gemm_tn(k, m, n, &ad[ia..ia + m * k], &g[i * m * n..(i + 1) * m * n], &mut gb[ib..ib + k * n]);
        });
    }
}

/// Mean with one refinement pass; exact for constant inputs.
fn corrected_mean(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let rough = values.clone().sum::<f64>() / n as f64;
    rough + values.map(|v| v - rough).sum::<f64>() / n as f64
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub(crate) fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    phi(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// A copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn binary(self, other: Var<'g>, kind: BinaryKind) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape(), data)?
            } else {
                let out = kernels::broadcast_shapes(a.shape(), b.shape())?;
                let sa = kernels::broadcast_strides(a.shape(), &out);
                let sb = kernels::broadcast_strides(b.shape(), &out);
                let mut data = vec![0.0; out.iter().product()];
                let (ad, bd) = (a.data(), b.data());
                kernels::for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
                Tensor::new(&out, data)?
            }
        };
        let rg = self.graph.requires(&[self.id, other.id]);
        self.graph.push(value, Op::Binary { kind, a: self.id, b: other.id }, rg, "binary op")
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'g>> {
        let value = self.graph.value(self.id).map(|v| v * factor);
        self.graph.push(value, Op::Scale { a: self.id, factor }, self.requires_grad(), "scale")
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        let value = self.graph.value(self.id).map(|v| v + c);
        self.graph.push(value, Op::AddScalar { a: self.id }, self.requires_grad(), "add_scalar")
    }

    /// Batched matrix product `[..., M, K] × [..., K, N]`; batch dims broadcast.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let lay = matmul_layout(a.shape(), b.shape())?;
            let (m, k, n) = (lay.m, lay.k, lay.n);
            let mut shape = lay.out_batch.clone();
            shape.extend([m, n]);
            let mut out = vec![0.0; shape.iter().product()];
            if lay.flat {
                kernels::gemm_nn(a.numel() / k, k, n, a.data(), b.data(), &mut out);
            } else {
                let (ad, bd) = (a.data(), b.data());
                kernels::for_each_broadcast(&lay.out_batch, &lay.sa, &lay.sb, |i, ia, ib| {
                    kernels::gemm_nn(m, k, n, &ad[ia..ia + m * k], &bd[ib..ib + k * n], &mut out[i * m * n..(i + 1) * m * n]);
                });
            }
            Tensor::new(&shape, out)?
        };
        let rg = self.graph.requires(&[self.id, other.id]);
        self.graph.push(value, Op::MatMul { a: self.id, b: other.id }, rg, "matmul")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.graph.value(self.id).reshape(shape)?;
        self.graph.push(value, Op::Reshape { a: self.id }, self.requires_grad(), "reshape")
    }

    /// `out.flat[i] = self.flat[index[i]]`; indices may repeat.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'g>> {
        let value = {
            let src = self.graph.value(self.id);
            let n = src.numel();
            if let Some(&bad) = index.iter().find(|&&i| i >= n) {
                return Err(Error::dim(format!("gather index {bad} out of range {n}")));
            }
            let d = src.data();
            Tensor::new(shape, index.iter().map(|&i| d[i]).collect())?
        };
        self.graph.push(value, Op::Gather { a: self.id, index }, self.requires_grad(), "gather")
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let (index, out_shape) = permute_index(&shape, axes)?;
        self.gather(index, &out_shape)
    }

    /// Cyclic shift: `out[.., (i + shift) mod n, ..] = in[.., i, ..]` along `axis`.
    pub fn roll(self, axis: usize, shift: isize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("roll axis {axis} out of range for {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let s = shift.rem_euclid(n as isize) as usize;
        let mut index = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for i in 0..n {
                let src = (i + n - s) % n;
                let base = (o * n + src) * inner;
                index.extend(base..base + inner);
            }
        }
        self.gather(index.into(), &shape)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of empty list".into()))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let base = nodes[first.id].value.shape();
            if axis >= base.len() {
                return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut out_shape = base.to_vec();
            out_shape[axis] = 0;
            for p in parts {
                first.same_graph(p);
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(Error::dim(format!("concat shapes {base:?} and {s:?} differ off axis {axis}")));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let tail: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * tail;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&out_shape, data)?
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let rg = graph.requires(&ids);
        graph.push(value, Op::Concat { inputs: ids, axis }, rg, "concat")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'g>> {
        let total = self.graph.value(self.id).sum();
        self.graph.push(Tensor::scalar(total), Op::Sum { a: self.id }, self.requires_grad(), "sum")
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.graph.value(self.id).numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums away the last axis.
    pub fn sum_last_axis(self) -> Result<Var<'g>> {
        let value = {
            let src = self.graph.value(self.id);
            let shape = src.shape();
            let last = *shape.last().ok_or_else(|| Error::dim("sum_last_axis on a scalar"))?;
            let data = src.data().chunks_exact(last).map(|c| c.iter().sum()).collect();
            Tensor::new(&shape[..shape.len() - 1], data)?
        };
        self.graph.push(value, Op::SumLastAxis { a: self.id }, self.requires_grad(), "sum_last_axis")
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        let value = {
            let src = self.graph.value(self.id);
            let (outer, len, inner) = softmax_layout(src.shape(), axis);
            let x = src.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for inn in 0..inner {
                    let base = o * len * inner + inn;
                    let mut mx = f64::NEG_INFINITY;
                    for t in 0..len {
                        mx = mx.max(x[base + t * inner]);
                    }
                    let mut total = 0.0;
                    for t in 0..len {
                        let e = (x[base + t * inner] - mx).exp();
                        y[base + t * inner] = e;
                        total += e;
                    }
                    for t in 0..len {
                        y[base + t * inner] /= total;
                    }
                }
            }
            Tensor::new(src.shape(), y)?
        };
        self.graph.push(value, Op::Softmax { a: self.id, axis }, self.requires_grad(), "softmax")
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        let value = {
            let src = self.graph.value(self.id);
            let (outer, len, inner) = softmax_layout(src.shape(), axis);
            let x = src.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for inn in 0..inner {
                    let base = o * len * inner + inn;
                    let mut mx = f64::NEG_INFINITY;
                    for t in 0..len {
                        mx = mx.max(x[base + t * inner]);
                    }
                    let mut total = 0.0;
                    for t in 0..len {
                        total += (x[base + t * inner] - mx).exp();
                    }
                    let lse = mx + total.ln();
                    for t in 0..len {
                        y[base + t * inner] = x[base + t * inner] - lse;
                    }
                }
            }
            Tensor::new(src.shape(), y)?
        };
        self.graph.push(value, Op::LogSoftmax { a: self.id, axis }, self.requires_grad(), "log_softmax")
    }

    /// Normalizes over the last axis with the biased variance.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        if eps < 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let (value, xhat, rstd) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let c = *x.shape().last().ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(Error::dim(format!(
                    "layer_norm over {:?} needs gamma/beta of shape [{c}], got {:?} / {:?}",
                    x.shape(),
                    gv.shape(),
                    bv.shape()
                )));
            }
            let rows = x.numel() / c;
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            let mut y = vec![0.0; x.numel()];
            for (r, row) in x.data().chunks_exact(c).enumerate() {
                let mean = corrected_mean(row.iter().copied(), c);
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for k in 0..c {
                    let h = (row[k] - mean) * rs;
                    xhat[r * c + k] = h;
                    y[r * c + k] = h * gv.data()[k] + bv.data()[k];
                }
            }
            (Tensor::new(x.shape(), y)?, xhat, rstd)
        };
        let rg = self.graph.requires(&[self.id, gamma.id, beta.id]);
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        self.graph.push(value, op, rg, "layer_norm")
    }

    /// Batch normalization of `[B, C, H, W]` over `(B, H, W)`.
    ///
    /// In training mode returns the batch `(mean, var)` (biased) alongside
    /// the output; in eval mode normalizes with the given running statistics.
    pub fn batch_norm(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        running: (&Tensor, &Tensor),
        train: bool,
        eps: f64,
    ) -> Result<(Var<'g>, Option<(Tensor, Tensor)>)> {
        let (value, xhat, inv_std, stats) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::dim(format!("batch_norm needs [B,C,H,W], got {s:?}")));
            }
            let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
            let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            for t in [gv, bv, running.0, running.1] {
                if t.shape() != [c] {
                    return Err(Error::dim(format!(
                        "batch_norm over {s:?} needs per-channel parameters of shape [{c}], got {:?}",
                        t.shape()
                    )));
                }
            }
            let n = b * plane;
            if train && n == 1 {
                return Err(Error::DegenerateStatistics(format!(
                    "training-mode batch_norm over {s:?} has a single value per channel"
                )));
            }
            let xd = x.data();
            let (mean, var) = if train {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let channel = (0..b).flat_map(|bi| {
                        let base = (bi * c + ch) * plane;
                        xd[base..base + plane].iter().copied()
                    });
                    mean[ch] = corrected_mean(channel, n);
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        acc += xd[base..base + plane].iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
                    }
                    var[ch] = acc / n as f64;
                }
                (mean, var)
            } else {
                (running.0.data().to_vec(), running.1.data().to_vec())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; xd.len()];
            let mut y = vec![0.0; xd.len()];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    for k in base..base + plane {
                        let h = (xd[k] - mean[ch]) * inv_std[ch];
                        xhat[k] = h;
                        y[k] = h * gv.data()[ch] + bv.data()[ch];
                    }
                }
            }
            let stats = train.then(|| (Tensor::new(&[c], mean).unwrap(), Tensor::new(&[c], var).unwrap()));
            (Tensor::new(s, y)?, xhat, inv_std, stats)
        };
        let rg = self.graph.requires(&[self.id, gamma.id, beta.id]);
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train };
        Ok((self.graph.push(value, op, rg, "batch_norm")?, stats))
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, padding: usize) -> Result<Var<'g>> {
        self.same_graph(&kernel);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (x, k) = (&nodes[self.id].value, &nodes[kernel.id].value);
            let (xs, ks) = (x.shape(), k.shape());
            if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
                return Err(Error::dim(format!("conv2d input {xs:?} incompatible with kernel {ks:?}")));
            }
            if stride == 0 {
                return Err(Error::Contract("conv2d stride must be >= 1".into()));
            }
            let (ho, wo) = match (
                kernels::conv_out_extent(xs[2], ks[2], stride, padding),
                kernels::conv_out_extent(xs[3], ks[3], stride, padding),
            ) {
                (Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(Error::dim(format!(
                        "conv2d kernel {ks:?} larger than padded input {xs:?} (padding {padding})"
                    )))
                }
            };
            let geom = ConvGeom { c_in: xs[1], h: xs[2], w: xs[3], kh: ks[2], kw: ks[3], stride, padding, ho, wo };
            let (rows, cols, c_out) = (geom.col_rows(), geom.col_cols(), ks[0]);
            let in_plane = xs[1] * xs[2] * xs[3];
            let mut col = vec![0.0; rows * cols];
            let mut out = vec![0.0; xs[0] * c_out * cols];
            for bi in 0..xs[0] {
                geom.im2col(&x.data()[bi * in_plane..(bi + 1) * in_plane], &mut col);
                kernels::gemm_nn(c_out, rows, cols, k.data(), &col, &mut out[bi * c_out * cols..(bi + 1) * c_out * cols]);
            }
            Tensor::new(&[xs[0], c_out, ho, wo], out)?
        };
        let rg = self.graph.requires(&[self.id, kernel.id]);
        self.graph.push(value, Op::Conv2d { x: self.id, kernel: kernel.id, stride, padding }, rg, "conv2d")
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Result<Var<'g>> {
        let value = self.graph.value(self.id).map(|v| v * phi(v));
        self.graph.push(value, Op::Gelu { a: self.id }, self.requires_grad(), "gelu")
    }

    pub fn relu(self) -> Result<Var<'g>> {
        let value = self.graph.value(self.id).map(|v| v.max(0.0));
        self.graph.push(value, Op::Relu { a: self.id }, self.requires_grad(), "relu")
    }
}

/// Flat gather index realizing an axis permutation.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Rc<[usize]>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim(format!("invalid permutation {axes:?} for shape {shape:?}")));
    }
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let mut index = Vec::with_capacity(shape.iter().product());
    kernels::for_each_broadcast(&out_shape, &strides, &zero, |_, src, _| index.push(src));
    Ok((index.into(), out_shape))
}
