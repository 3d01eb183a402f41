//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a `1×1` output walks the tape in reverse and
//! returns [`Gradients`] for every node that requires a gradient. Graphs
//! are cheap; the training loop builds a fresh one per step.
//!
//! ```
//! use anyface_core::autodiff::Graph;
//! use anyface_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::row(vec![1.0, -2.0]));
//! let loss = x.square().sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_kernel, matmul_tn_kernel, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Norm(usize),
    SegmentMean(usize, Vec<(usize, usize)>),
    Transpose(usize),
    Reshape(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize, f64),
    LayerNormRows(usize, f64),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy(usize, Vec<usize>),
    Kl(usize, usize),
    EmbedMean(usize, Vec<Vec<usize>>),
    SumRows(usize),
    NormalizeRows(usize),
    RowCosine(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The tape. Single-threaded; build one per computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::Input {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", root_value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].requires_grad).map(|data| {
                    Tensor::new(nodes[id].value.shape().to_vec(), data).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros if it was not reached.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => {
                let v = var.value();
                Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]).expect("shape")
            }
        }
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (r, k, c) = (val(a).rows(), val(a).cols(), val(b).cols());
            if nodes[a].requires_grad {
                let da = matmul_nt_kernel(g, val(b).data(), r, c, k);
                accumulate(grads, nodes, a, |buf| add_into(buf, &da));
            }
            if nodes[b].requires_grad {
                let db = matmul_tn_kernel(val(a).data(), g, r, k, c);
                accumulate(grads, nodes, b, |buf| add_into(buf, &db));
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |buf| add_into(buf, g));
            accumulate(grads, nodes, b, |buf| add_into(buf, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |buf| add_into(buf, g));
            accumulate(grads, nodes, b, |buf| {
                buf.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv)
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, b, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * av[i];
                }
            });
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] / bv[i];
                }
            });
            accumulate(grads, nodes, b, |buf| {
                for i in 0..buf.len() {
                    buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        &Op::AddRow(a, row) => {
            let c = out.cols();
            accumulate(grads, nodes, a, |buf| add_into(buf, g));
            accumulate(grads, nodes, row, |buf| {
                for (i, gv) in g.iter().enumerate() {
                    buf[i % c] += gv;
                }
            });
        }
        &Op::MulRow(a, row) => {
            let c = out.cols();
            let (av, rv) = (val(a).data(), val(row).data());
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * rv[i % c];
                }
            });
            accumulate(grads, nodes, row, |buf| {
                for (i, gv) in g.iter().enumerate() {
                    buf[i % c] += gv * av[i];
                }
            });
        }
        &Op::MulScalar(a, s) => {
            let sv = val(s).item();
            let av = val(a).data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * sv;
                }
            });
            accumulate(grads, nodes, s, |buf| {
                buf[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
            });
        }
        &Op::Scale(a, f) => {
            accumulate(grads, nodes, a, |buf| {
                buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * f)
            });
        }
        &Op::AddConst(a) | &Op::Reshape(a) => {
            accumulate(grads, nodes, a, |buf| add_into(buf, g));
        }
        &Op::Tanh(a) => {
            let y = out.data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        &Op::Gelu(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * gelu_grad(x[i]);
                }
            });
        }
        &Op::Relu(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    if x[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            });
        }
        &Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * y[i];
                }
            });
        }
        &Op::Ln(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] / x[i];
                }
            });
        }
        &Op::Abs(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    if x[i] != 0.0 {
                        buf[i] += g[i] * x[i].signum();
                    }
                }
            });
        }
        &Op::Square(a) => {
            let x = val(a).data();
            accumulate(grads, nodes, a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += 2.0 * x[i] * g[i];
                }
            });
        }
        &Op::Sum(a) => {
            accumulate(grads, nodes, a, |buf| {
                buf.iter_mut().for_each(|o| *o += g[0])
            });
        }
        &Op::Mean(a) => {
            let n = val(a).len() as f64;
            accumulate(grads, nodes, a, |buf| {
                buf.iter_mut().for_each(|o| *o += g[0] / n)
            });
        }
        &Op::Norm(a) => {
            let norm = out.item();
            let x = val(a).data();
            if norm > 0.0 {
                accumulate(grads, nodes, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[0] * x[i] / norm;
                    }
                });
            }
        }
        Op::SegmentMean(a, segments) => {
            let c = out.cols();
            accumulate(grads, nodes, *a, |buf| {
                for (s, &(start, end)) in segments.iter().enumerate() {
                    let inv = 1.0 / (end - start) as f64;
                    for r in start..end {
                        for j in 0..c {
                            buf[r * c + j] += g[s * c + j] * inv;
                        }
                    }
                }
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            accumulate(grads, nodes, a, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        &Op::SliceRows(a, start) => {
            let offset = start * out.cols();
            accumulate(grads, nodes, a, |buf| {
                add_into(&mut buf[offset..offset + g.len()], g)
            });
        }
        &Op::SliceCols(a, start, end) => {
            let src_c = val(a).cols();
            let w = end - start;
            accumulate(grads, nodes, a, |buf| {
                for i in 0..out.rows() {
                    for j in 0..w {
                        buf[i * src_c + start + j] += g[i * w + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                accumulate(grads, nodes, p, |buf| {
                    add_into(buf, &g[offset..offset + len])
                });
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut col = 0;
            for &p in parts {
                let w = val(p).cols();
                accumulate(grads, nodes, p, |buf| {
                    for i in 0..out.rows() {
                        for j in 0..w {
                            buf[i * w + j] += g[i * total + col + j];
                        }
                    }
                });
                col += w;
            }
        }
        &Op::SoftmaxRows(a, temperature) => {
            let c = out.cols();
            let y = out.data();
            accumulate(grads, nodes, a, |buf| {
                for r in 0..out.rows() {
                    let row = r * c..(r + 1) * c;
                    let dot: f64 = g[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in row {
                        buf[i] += y[i] * (g[i] - dot) / temperature;
                    }
                }
            });
        }
        &Op::LayerNormRows(a, eps) => {
            let c = out.cols();
            let x = val(a).data();
            let y = out.data();
            accumulate(grads, nodes, a, |buf| {
                for r in 0..out.rows() {
                    let row = r * c..(r + 1) * c;
                    let (_, inv_std) = row_stats(&x[row.clone()], eps);
                    let g_mean = g[row.clone()].iter().sum::<f64>() / c as f64;
                    let gy_mean = g[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for i in row {
                        buf[i] += inv_std * (g[i] - g_mean - y[i] * gy_mean);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), segments, *heads, probs),
        Op::CrossEntropy(logits, targets) => {
            let c = val(*logits).cols();
            let lv = val(*logits).data();
            let n = targets.len() as f64;
            accumulate(grads, nodes, *logits, |buf| {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * c..(r + 1) * c];
                    let p = softmax_slice(row, 1.0);
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        buf[r * c + j] += g[0] * (p[j] - onehot) / n;
                    }
                }
            });
        }
        &Op::Kl(p, q) => {
            let (pv, qv) = (val(p).data(), val(q).data());
            accumulate(grads, nodes, p, |buf| {
                for i in 0..buf.len() {
                    if pv[i] > 0.0 {
                        buf[i] += g[0] * ((pv[i] / qv[i]).ln() + 1.0);
                    }
                }
            });
            accumulate(grads, nodes, q, |buf| {
                for i in 0..buf.len() {
                    if pv[i] > 0.0 {
                        buf[i] -= g[0] * pv[i] / qv[i];
                    }
                }
            });
        }
        Op::EmbedMean(table, ids) => {
            let c = out.cols();
            accumulate(grads, nodes, *table, |buf| {
                for (s, seq) in ids.iter().enumerate() {
                    let inv = 1.0 / seq.len() as f64;
                    for &t in seq {
                        for j in 0..c {
                            buf[t * c + j] += g[s * c + j] * inv;
                        }
                    }
                }
            });
        }
        &Op::SumRows(a) => {
            let c = val(a).cols();
            accumulate(grads, nodes, a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i / c];
                }
            });
        }
        &Op::NormalizeRows(a) => {
            let c = out.cols();
            let (x, y) = (val(a).data(), out.data());
            accumulate(grads, nodes, a, |buf| {
                for r in 0..out.rows() {
                    let row = r * c..(r + 1) * c;
                    let norm = x[row.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let gy: f64 = g[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in row {
                        buf[i] += (g[i] - y[i] * gy) / norm;
                    }
                }
            });
        }
        &Op::RowCosine(a, b) => {
            let c = val(a).cols();
            let (av, bv) = (val(a).data(), val(b).data());
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for r in 0..out.rows() {
                let row = r * c..(r + 1) * c;
                let (x, y) = (&av[row.clone()], &bv[row.clone()]);
                let (dot, nx, ny) = cosine_parts(x, y);
                let denom = nx * ny + COSINE_EPS;
                for j in 0..c {
                    let mut gx = y[j] / denom;
                    let mut gy = x[j] / denom;
                    if nx > 0.0 {
                        gx -= dot * ny * x[j] / (nx * denom * denom);
                    }
                    if ny > 0.0 {
                        gy -= dot * nx * y[j] / (ny * denom * denom);
                    }
                    da[r * c + j] = g[r] * gx;
                    db[r * c + j] = g[r] * gy;
                }
            }
            accumulate(grads, nodes, a, |buf| add_into(buf, &da));
            accumulate(grads, nodes, b, |buf| add_into(buf, &db));
        }
    }
}

fn cosine_parts(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let dot = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot, nx, ny)
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_slice(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    segments: &[(usize, usize)],
    heads: usize,
) -> (Tensor, Vec<f64>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::new();
    for &(s0, s1) in segments {
        let n = s1 - s0;
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let qi = &qd[(s0 + i) * d + c0..(s0 + i) * d + c0 + dh];
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kj = &kd[(s0 + j) * d + c0..(s0 + j) * d + c0 + dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let p = softmax_slice(&scores, 1.0);
                let o = &mut out[(s0 + i) * d + c0..(s0 + i) * d + c0 + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[(s0 + j) * d + c0..(s0 + j) * d + c0 + dh];
                    for (ov, vv) in o.iter_mut().zip(vj) {
                        *ov += pj * vv;
                    }
                }
                probs.extend_from_slice(&p);
            }
        }
    }
    (Tensor::matrix(q.rows(), d, out), probs)
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    segments: &[(usize, usize)],
    heads: usize,
    probs: &[f64],
) {
    let qt = &nodes[q].value;
    let d = qt.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (qt.data(), nodes[k].value.data(), nodes[v].value.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; qd.len()];
    let mut dv = vec![0.0; qd.len()];
    let mut offset = 0;
    for &(s0, s1) in segments {
        let n = s1 - s0;
        for h in 0..heads {
            let c0 = h * dh;
            let p = &probs[offset..offset + n * n];
            offset += n * n;
            for i in 0..n {
                let gi = (s0 + i) * d + c0;
                let dp: Vec<f64> = (0..n)
                    .map(|j| {
                        let vj = (s0 + j) * d + c0;
                        (0..dh).map(|c| g[gi + c] * vd[vj + c]).sum()
                    })
                    .collect();
                let row_p = &p[i * n..(i + 1) * n];
                let dot: f64 = row_p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let vj = (s0 + j) * d + c0;
                    for c in 0..dh {
                        dv[vj + c] += row_p[j] * g[gi + c];
                    }
                    let ds = row_p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[gi + c] += ds * kd[vj + c];
                        dk[vj + c] += ds * qd[gi + c];
                    }
                }
            }
        }
    }
    accumulate(grads, nodes, q, |buf| add_into(buf, &dq));
    accumulate(grads, nodes, k, |buf| add_into(buf, &dk));
    accumulate(grads, nodes, v, |buf| add_into(buf, &dv));
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.push(out, op, &[self.id])
    }

    fn same_shape(&self, op: &'static str, other: &Var<'g>) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn zip(
        &self,
        name: &'static str,
        other: &Var<'g>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(name, other)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.graph.push(out, op, &[self.id, other.id]))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self
            .graph
            .push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip("add", other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip("sub", other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip("mul", other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip("div", other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        row: &Var<'g>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(Error::dim(name, a.shape(), r.shape()));
        }
        let c = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r.data()[i % c]))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.graph.push(out, op, &[self.id, row.id]))
    }

    /// Adds a `1×c` row to every row.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast("add_row", row, Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// Multiplies every row elementwise by a `1×c` row.
    pub fn mul_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast("mul_row", row, Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    /// Multiplies by a `1×1` variable.
    pub fn mul_scalar(&self, s: &Var<'g>) -> Result<Var<'g>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::dim("mul_scalar", &self.shape(), sv.shape()));
        }
        let k = sv.item();
        let out = self.value().scale(k);
        Ok(self
            .graph
            .push(out, Op::MulScalar(self.id, s.id), &[self.id, s.id]))
    }

    pub fn scale(&self, f: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, f), |v| v * f)
    }

    pub fn add_const(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddConst(self.id), |v| v + c)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn gelu(&self) -> Var<'g> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    /// `max(x, 0)`.
    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Result<Var<'g>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Numeric {
                op: "ln",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Ln(self.id), f64::ln))
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sum(&self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.graph.push(out, Op::Mean(self.id), &[self.id])
    }

    /// Euclidean norm over all entries. The gradient at zero is taken as zero.
    pub fn norm(&self) -> Var<'g> {
        let out = Tensor::scalar(self.value().frobenius());
        self.graph.push(out, Op::Norm(self.id), &[self.id])
    }

    /// Row-wise mean inside each `[start, end)` segment; one output row per segment.
    pub fn segment_mean(&self, segments: &[(usize, usize)]) -> Result<Var<'g>> {
        let a = self.value();
        check_segments("segment_mean", segments, a.rows())?;
        let c = a.cols();
        let mut data = Vec::with_capacity(segments.len() * c);
        for &(start, end) in segments {
            let mean = a.slice_rows(start, end).mean_rows();
            data.extend_from_slice(mean.data());
        }
        let out = Tensor::matrix(segments.len(), c, data);
        Ok(self
            .graph
            .push(out, Op::SegmentMean(self.id, segments.to_vec()), &[self.id]))
    }

    pub fn mean_rows(&self) -> Result<Var<'g>> {
        let rows = self.value().rows();
        self.segment_mean(&[(0, rows)])
    }

    pub fn transpose(&self) -> Var<'g> {
        let out = self.value().transpose();
        self.graph.push(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.value();
        if start >= end || end > a.rows() {
            return Err(Error::Input {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {:?}", a.shape()),
            });
        }
        let out = a.slice_rows(start, end);
        Ok(self
            .graph
            .push(out, Op::SliceRows(self.id, start), &[self.id]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.value();
        if start >= end || end > a.cols() {
            return Err(Error::Input {
                op: "slice_cols",
                detail: format!("cols {start}..{end} of {:?}", a.shape()),
            });
        }
        let (r, c) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&a.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, end - start, data);
        Ok(self
            .graph
            .push(out, Op::SliceCols(self.id, start, end), &[self.id]))
    }

    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'g>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter {
                name: "temperature",
                detail: format!("must be positive, got {temperature}"),
            });
        }
        let a = self.value();
        if !a.is_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let c = a.cols();
        let data: Vec<f64> = (0..a.rows())
            .flat_map(|r| softmax_slice(a.row_slice(r), temperature))
            .collect();
        let out = Tensor::matrix(a.rows(), c, data);
        Ok(self
            .graph
            .push(out, Op::SoftmaxRows(self.id, temperature), &[self.id]))
    }

    /// Per-row standardization (no affine parameters).
    pub fn layer_norm_rows(&self, eps: f64) -> Var<'g> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(a.len());
        for r in 0..a.rows() {
            let row = a.row_slice(r);
            let (mean, inv_std) = row_stats(row, eps);
            data.extend(row.iter().map(|v| (v - mean) * inv_std));
        }
        let out = Tensor::matrix(a.rows(), c, data);
        self.graph
            .push(out, Op::LayerNormRows(self.id, eps), &[self.id])
    }

    /// Multi-head scaled dot-product attention, restricted to `segments`
    /// (rows attend only to rows of their own segment). `self` is the query.
    pub fn attention(
        &self,
        k: &Var<'g>,
        v: &Var<'g>,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var<'g>> {
        let (qt, kt, vt) = (self.value(), k.value(), v.value());
        if qt.shape() != kt.shape() || qt.shape() != vt.shape() {
            return Err(Error::dim("attention", qt.shape(), kt.shape()));
        }
        if heads == 0 || qt.cols() % heads != 0 {
            return Err(Error::Parameter {
                name: "heads",
                detail: format!("{heads} does not divide width {}", qt.cols()),
            });
        }
        check_segments("attention", segments, qt.rows())?;
        let (out, probs) = attention_forward(&qt, &kt, &vt, segments, heads);
        let op = Op::Attention {
            q: self.id,
            k: k.id,
            v: v.id,
            segments: segments.to_vec(),
            heads,
            probs,
        };
        Ok(self.graph.push(out, op, &[self.id, k.id, v.id]))
    }

    /// Mean softmax cross-entropy of each row against its target column.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if targets.len() != a.rows() || targets.iter().any(|&t| t >= a.cols()) {
            return Err(Error::dim("cross_entropy", a.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = a.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self
            .graph
            .push(out, Op::CrossEntropy(self.id, targets.to_vec()), &[self.id]))
    }

    /// Mean of embedding-table rows for each id sequence; `self` is the table.
    pub fn embed_mean(&self, sequences: &[Vec<usize>]) -> Result<Var<'g>> {
        let table = self.value();
        let vocab = table.rows();
        let c = table.cols();
        let mut data = Vec::with_capacity(sequences.len() * c);
        for seq in sequences {
            if seq.is_empty() {
                return Err(Error::Empty("embed_mean"));
            }
            // Canonical order makes the pooled value bitwise order-invariant.
            let mut sorted = seq.clone();
            sorted.sort_unstable();
            let mut acc = vec![0.0; c];
            for &t in &sorted {
                if t >= vocab {
                    return Err(Error::Vocabulary { id: t, size: vocab });
                }
                add_into(&mut acc, table.row_slice(t));
            }
            data.extend(acc.into_iter().map(|v| v / seq.len() as f64));
        }
        let out = Tensor::matrix(sequences.len().max(1), c, data);
        Ok(self
            .graph
            .push(out, Op::EmbedMean(self.id, sequences.to_vec()), &[self.id]))
    }

    /// `r×c → r×1` row sums.
    pub fn sum_rows(&self) -> Var<'g> {
        let a = self.value();
        let data = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
        let out = Tensor::matrix(a.rows(), 1, data);
        self.graph.push(out, Op::SumRows(self.id), &[self.id])
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn normalize_rows(&self) -> Var<'g> {
        let a = self.value();
        let mut data = Vec::with_capacity(a.len());
        for r in 0..a.rows() {
            let row = a.row_slice(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            data.extend(row.iter().map(|v| v * inv));
        }
        let out = Tensor::matrix(a.rows(), a.cols(), data);
        self.graph.push(out, Op::NormalizeRows(self.id), &[self.id])
    }

    /// Row-by-row [`cosine_similarity`]: `r×c, r×c → r×1`.
    pub fn row_cosine(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape("row_cosine", other)?;
        let data = (0..a.rows())
            .map(|r| {
                let (dot, nx, ny) = cosine_parts(a.row_slice(r), b.row_slice(r));
                dot / (nx * ny + COSINE_EPS)
            })
            .collect();
        let out = Tensor::matrix(a.rows(), 1, data);
        Ok(self
            .graph
            .push(out, Op::RowCosine(self.id, other.id), &[self.id, other.id]))
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.graph.push(out, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = values[0].rows();
        if let Some(bad) = values.iter().find(|v| v.rows() != r) {
            return Err(Error::dim("concat_cols", values[0].shape(), bad.shape()));
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.graph.push(
            Tensor::matrix(r, total, data),
            Op::ConcatCols(ids.clone()),
            &ids,
        ))
    }
}

fn check_segments(op: &'static str, segments: &[(usize, usize)], rows: usize) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::Empty(op));
    }
    for &(s, e) in segments {
        if s >= e || e > rows {
            return Err(Error::Input {
                op,
                detail: format!("segment {s}..{e} outside {rows} rows"),
            });
        }
    }
    Ok(())
}

/// Softmax of a `1×n` row at the given temperature.
pub fn softmax<'g>(x: &Var<'g>, temperature: f64) -> Result<Var<'g>> {
    x.softmax_rows(temperature)
}

/// `Σ p ln(p/q)` with `0·ln 0 = 0`.
pub fn kl_divergence<'g>(p: &Var<'g>, q: &Var<'g>) -> Result<Var<'g>> {
    let (pv, qv) = p.same_shape("kl_divergence", q)?;
    for (name, t) in [("p", &pv), ("q", &qv)] {
        let total = t.sum();
        if (total - 1.0).abs() > 1e-9 || t.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Input {
                op: "kl_divergence",
                detail: format!("{name} is not a probability vector (sum {total})"),
            });
        }
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in pv.data().iter().zip(qv.data()).enumerate() {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::Support { index: i, p: pi });
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(p.graph
        .push(Tensor::scalar(total), Op::Kl(p.id, q.id), &[p.id, q.id]))
}

pub const COSINE_EPS: f64 = 1e-8;

/// `a·b / (‖a‖‖b‖ + ε)` over flattened entries.
pub fn cosine_similarity<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    let (av, bv) = (a.value(), b.value());
    if av.len() != bv.len() {
        return Err(Error::dim("cosine_similarity", av.shape(), bv.shape()));
    }
    let b = if av.shape() == bv.shape() {
        *b
    } else {
        b.reshape(av.shape().to_vec())?
    };
    let dot = a.mul(&b)?.sum();
    let denom = a.norm().mul(&b.norm())?.add_const(COSINE_EPS);
    dot.div(&denom)
}
