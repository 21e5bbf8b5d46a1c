//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is a valid topological order by construction. [`Graph::backward`] walks
//! the tape once in reverse and accumulates gradients additively.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::kernels::{self, Conv2dGeometry, ConvTransposeGeometry};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Backward rule for an op whose forward is computed outside the graph.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (`None` = no contribution).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `b` matches the trailing axes of `a`; value is `b.numel()`.
    Trailing(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Padding and stride options for [`Var::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// top, bottom, left, right
    pub padding: [usize; 4],
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: (1, 1),
            dilation: (1, 1),
            padding: [0; 4],
        }
    }
}

impl Conv2dOptions {
    pub fn symmetric(stride: (usize, usize), dilation: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2dOptions {
            stride,
            dilation,
            padding: [padding.0, padding.0, padding.1, padding.1],
        }
    }
}

enum Op {
    Leaf,
    Binary { kind: Binary, a: usize, b: usize, bcast: Bcast },
    Scale { a: usize, s: f64 },
    AddScalar { a: usize },
    Sigmoid { a: usize },
    Swish { a: usize },
    PowSafe { a: usize, p: f64 },
    Prelu { x: usize, alpha: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    Norm { x: usize, gamma: usize, beta: usize, group: usize, channels: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, in_dim: usize, out_dim: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum { x: usize },
    Mean { x: usize },
    Glu { x: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: Conv2dGeometry },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, geom: ConvTransposeGeometry },
    DepthwiseConv1d { x: usize, w: usize, b: Option<usize>, dims: (usize, usize, usize), k: usize },
    Custom { inputs: Vec<usize>, rule: Rc<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    tracking: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            tracking: true,
        }
    }

    /// A forward-only graph; [`Graph::backward`] on it fails.
    pub fn untracked() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn parameter(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, self.tracking)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if self.tracking && requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad: self.tracking && requires_grad,
        });
        Var { graph: self, id }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Registers an externally computed output with its backward rule.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g>], output: Tensor, rule: Rc<dyn CustomOp>) -> Var<'g> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(output, Op::Custom { inputs: ids, rule }, rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !self.tracking {
            return Err(Error::Backward("graph was built without a tape (untracked)".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[output.id];
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "output must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Backward("output does not depend on any tracked tensor".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                backward_node(&nodes, node, &g, &mut grads)?;
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad && matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::from_raw(n.value.shape().to_vec(), g, Precision::Double))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of tracked leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot => *slot = Some(g),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce() -> Vec<f64>) {
    if nodes[id].requires_grad {
        let g = f();
        accumulate(grads, nodes, id, g);
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, bcast } => {
            let (a, b, bcast, kind) = (*a, *b, *bcast, *kind);
            let av = val(a).data();
            let bv = val(b).data();
            let b_at = |i: usize| match bcast {
                Bcast::Same => bv[i],
                Bcast::Scalar => bv[0],
                Bcast::Trailing(n) => bv[i % n],
            };
            accumulate_with(grads, nodes, a, || match kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => g.iter().enumerate().map(|(i, gv)| gv * b_at(i)).collect(),
            });
            if rg(b) {
                let sign = if kind == Binary::Sub { -1.0 } else { 1.0 };
                let term = |i: usize| match kind {
                    Binary::Add | Binary::Sub => sign * g[i],
                    Binary::Mul => g[i] * av[i],
                };
                let gb = match bcast {
                    Bcast::Same => (0..g.len()).map(term).collect(),
                    Bcast::Scalar => vec![(0..g.len()).map(term).sum()],
                    Bcast::Trailing(n) => {
                        let mut gb = vec![0.0; n];
                        for i in 0..g.len() {
                            gb[i % n] += term(i);
                        }
                        gb
                    }
                };
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::Scale { a, s } => accumulate_with(grads, nodes, *a, || g.iter().map(|v| v * s).collect()),
        Op::AddScalar { a } => accumulate_with(grads, nodes, *a, || g.to_vec()),
        Op::Sigmoid { a } => {
            let y = node.value.data();
            accumulate_with(grads, nodes, *a, || {
                g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()
            })
        }
        Op::Swish { a } => {
            let x = val(*a).data();
            accumulate_with(grads, nodes, *a, || {
                g.iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        let s = kernels::sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect()
            })
        }
        Op::PowSafe { a, p } => {
            let x = val(*a).data();
            accumulate_with(grads, nodes, *a, || {
                g.iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > POW_FLOOR { gv * p * xv.powf(p - 1.0) } else { 0.0 })
                    .collect()
            })
        }
        Op::Prelu { x, alpha, axis } => {
            let xt = val(*x);
            let xv = xt.data();
            let al = val(*alpha).data();
            let (_, c, inner) = kernels::split_axis(xt.shape(), *axis);
            let ch = |i: usize| (i / inner) % c;
            accumulate_with(grads, nodes, *x, || {
                g.iter()
                    .zip(xv)
                    .enumerate()
                    .map(|(i, (gv, &v))| if v > 0.0 { *gv } else { gv * al[ch(i)] })
                    .collect()
            });
            accumulate_with(grads, nodes, *alpha, || {
                let mut ga = vec![0.0; c];
                for (i, (gv, &v)) in g.iter().zip(xv).enumerate() {
                    if v <= 0.0 {
                        ga[ch(i)] += gv * v;
                    }
                }
                ga
            });
        }
        Op::Softmax { x, axis } => {
            let (o, d, i) = kernels::split_axis(node.value.shape(), *axis);
            accumulate_with(grads, nodes, *x, || kernels::softmax_backward(node.value.data(), g, o, d, i));
        }
        Op::Norm { x, gamma, beta, group, channels, xhat, rstd } => {
            let (group, channels) = (*group, *channels);
            let ga = val(*gamma).data();
            // layer norm: gain indexed by position within row; instance norm: by channel of the row
            let gain = |row: usize, j: usize| if channels == 0 { ga[j] } else { ga[row % channels] };
            accumulate_with(grads, nodes, *x, || kernels::normalize_backward(g, xhat, rstd, group, gain));
            let nparams = if channels == 0 { group } else { channels };
            let slot = |i: usize| if channels == 0 { i % group } else { (i / group) % channels };
            accumulate_with(grads, nodes, *gamma, || {
                let mut gg = vec![0.0; nparams];
                for (i, (gv, h)) in g.iter().zip(xhat).enumerate() {
                    gg[slot(i)] += gv * h;
                }
                gg
            });
            accumulate_with(grads, nodes, *beta, || {
                let mut gb = vec![0.0; nparams];
                for (i, gv) in g.iter().enumerate() {
                    gb[slot(i)] += gv;
                }
                gb
            });
        }
        Op::MatMul { a, b, batch, m, k, n, b_shared } => {
            let (batch, m, k, n, b_shared) = (*batch, *m, *k, *n, *b_shared);
            let av = val(*a).data();
            let bv = val(*b).data();
            accumulate_with(grads, nodes, *a, || {
                // g [batch,m,n] x b^T [n,k]
                let bt = transpose_last2(bv, if b_shared { 1 } else { batch }, k, n);
                kernels::matmul(g, &bt, batch, m, n, k, b_shared)
            });
            accumulate_with(grads, nodes, *b, || {
                if b_shared {
                    // sum_batch a^T g  ==  (a reshaped [batch*m, k])^T x (g [batch*m, n])
                    let at_full = transpose_last2(av, 1, batch * m, k);
                    kernels::matmul(&at_full, g, 1, k, batch * m, n, false)
                } else {
                    let at = transpose_last2(av, batch, m, k);
                    kernels::matmul(&at, g, batch, k, m, n, false)
                }
            });
        }
        Op::Linear { x, w, b, rows, in_dim, out_dim } => {
            let (rows, i_d, o_d) = (*rows, *in_dim, *out_dim);
            let xv = val(*x).data();
            let wv = val(*w).data();
            // y = x W^T + b ; W [out, in]
            accumulate_with(grads, nodes, *x, || kernels::matmul(g, wv, 1, rows, o_d, i_d, false));
            accumulate_with(grads, nodes, *w, || {
                let gt = transpose_last2(g, 1, rows, o_d);
                kernels::matmul(&gt, xv, 1, o_d, rows, i_d, false)
            });
            if let Some(b) = b {
                accumulate_with(grads, nodes, *b, || {
                    let mut gb = vec![0.0; o_d];
                    for r in 0..rows {
                        for (acc, gv) in gb.iter_mut().zip(&g[r * o_d..(r + 1) * o_d]) {
                            *acc += gv;
                        }
                    }
                    gb
                });
            }
        }
        Op::Reshape { x } => accumulate_with(grads, nodes, *x, || g.to_vec()),
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            accumulate_with(grads, nodes, *x, || kernels::permute(g, node.value.shape(), &inv));
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
            let mut offset = 0;
            for &inp in inputs {
                let d = val(inp).shape()[*axis];
                accumulate_with(grads, nodes, inp, || slice_axis(g, outer, total, inner, offset, d));
                offset += d;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, total, inner) = kernels::split_axis(xs, *axis);
            let len = node.value.shape()[*axis];
            accumulate_with(grads, nodes, *x, || {
                let mut gx = vec![0.0; outer * total * inner];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * total + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(src);
                }
                gx
            });
        }
        Op::Sum { x } => {
            let n = val(*x).numel();
            accumulate_with(grads, nodes, *x, || vec![g[0]; n]);
        }
        Op::Mean { x } => {
            let n = val(*x).numel();
            accumulate_with(grads, nodes, *x, || vec![g[0] / n as f64; n]);
        }
        Op::Glu { x } => {
            let xt = val(*x);
            let d = *xt.shape().last().unwrap();
            let h = d / 2;
            let xv = xt.data();
            accumulate_with(grads, nodes, *x, || {
                let rows = xv.len() / d;
                let mut gx = vec![0.0; xv.len()];
                for r in 0..rows {
                    for j in 0..h {
                        let a = xv[r * d + j];
                        let s = kernels::sigmoid(xv[r * d + h + j]);
                        let gv = g[r * h + j];
                        gx[r * d + j] = gv * s;
                        gx[r * d + h + j] = gv * a * s * (1.0 - s);
                    }
                }
                gx
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let need = (rg(*x), rg(*w), b.map(rg).unwrap_or(false));
            let (gx, gw, gb) = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g, need);
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, *w, gw);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let need = (rg(*x), rg(*w), b.map(rg).unwrap_or(false));
            let (gx, gw, gb) = kernels::conv_transpose2d_backward(geom, val(*x).data(), val(*w).data(), g, need);
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, *w, gw);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::DepthwiseConv1d { x, w, b, dims, k } => {
            let need = (rg(*x), rg(*w), b.map(rg).unwrap_or(false));
            let (gx, gw, gb) =
                kernels::depthwise_conv1d_backward(*dims, *k, val(*x).data(), val(*w).data(), g, need);
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, *w, gw);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = rule.backward(&ins, &node.value, g)?;
            if gs.len() != inputs.len() {
                return Err(Error::Backward(format!(
                    "{}: backward returned {} gradients for {} inputs",
                    rule.name(),
                    gs.len(),
                    inputs.len()
                )));
            }
            for (&inp, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    accumulate(grads, nodes, inp, gi);
                }
            }
        }
    }
    Ok(())
}

const POW_FLOOR: f64 = 1e-24;

fn transpose_last2(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    kernels::permute(x, &[batch, r, c], &[0, 2, 1])
}

fn slice_axis(x: &[f64], outer: usize, total: usize, inner: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * total + start) * inner;
        out.extend_from_slice(&x[s..s + len * inner]);
    }
    out
}

/// Handle to a tape node.
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

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    /// Owned copy of the current value.
    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(&[self.id])
    }

    fn precision_with(&self, others: &[Var<'g>]) -> Precision {
        others
            .iter()
            .fold(self.value().precision(), |p, o| p.join(o.value().precision()))
    }

    fn emit(&self, inputs: &[usize], shape: Vec<usize>, mut data: Vec<f64>, precision: Precision, op: Op) -> Var<'g> {
        precision.round_all(&mut data);
        let rg = self.graph.requires(inputs);
        self.graph.push(Tensor::from_raw(shape, data, precision), op, rg)
    }

    fn binary(self, other: Var<'g>, kind: Binary, name: &'static str) -> Result<Var<'g>> {
        let (shape, bcast, data) = {
            let a = self.value();
            let b = other.value();
            let bcast = if a.shape() == b.shape() {
                Bcast::Same
            } else if b.numel() == 1 {
                Bcast::Scalar
            } else if b.rank() < a.rank() && a.shape()[a.rank() - b.rank()..] == *b.shape() {
                Bcast::Trailing(b.numel())
            } else {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            };
            let bv = b.data();
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            let data: Vec<f64> = match bcast {
                Bcast::Same => a.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
                Bcast::Scalar => a.data().iter().map(|&x| f(x, bv[0])).collect(),
                Bcast::Trailing(n) => a.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect(),
            };
            (a.shape().to_vec(), bcast, data)
        };
        let p = self.precision_with(&[other]);
        Ok(self.emit(&[self.id, other.id], shape, data, p, Op::Binary { kind, a: self.id, b: other.id, bcast }))
    }

    /// Elementwise sum; `other` may be a scalar or match trailing axes.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub, "sub")
    }

    /// Elementwise product; `other` may be a scalar or match trailing axes.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let (shape, data, p) = self.map_values(|v| v * s);
        self.emit(&[self.id], shape, data, p, Op::Scale { a: self.id, s })
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let (shape, data, p) = self.map_values(|v| v + s);
        self.emit(&[self.id], shape, data, p, Op::AddScalar { a: self.id })
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>, Precision) {
        let v = self.value();
        (v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect(), v.precision())
    }

    pub fn sigmoid(self) -> Var<'g> {
        let (shape, data, p) = self.map_values(kernels::sigmoid);
        self.emit(&[self.id], shape, data, p, Op::Sigmoid { a: self.id })
    }

    /// `x * sigmoid(x)`
    pub fn swish(self) -> Var<'g> {
        let (shape, data, p) = self.map_values(|x| x * kernels::sigmoid(x));
        self.emit(&[self.id], shape, data, p, Op::Swish { a: self.id })
    }

    /// `x^p` for `x > 1e-24`, zero (with zero gradient) otherwise.
    pub fn pow_safe(self, p: f64) -> Var<'g> {
        let (shape, data, prec) = self.map_values(|x| if x > POW_FLOOR { x.powf(p) } else { 0.0 });
        self.emit(&[self.id], shape, data, prec, Op::PowSafe { a: self.id, p })
    }

    /// Parametric ReLU with one slope per index of `axis`.
    pub fn prelu(self, alpha: Var<'g>, axis: usize) -> Result<Var<'g>> {
        let (shape, data) = {
            let x = self.value();
            let a = alpha.value();
            if axis >= x.rank() || a.rank() != 1 || a.numel() != x.shape()[axis] {
                return Err(Error::shape(
                    "prelu",
                    format!("input {:?}, slopes {:?}, axis {axis}", x.shape(), a.shape()),
                ));
            }
            let (_, c, inner) = kernels::split_axis(x.shape(), axis);
            let al = a.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if v > 0.0 { v } else { al[(i / inner) % c] * v })
                .collect();
            (x.shape().to_vec(), data)
        };
        let p = self.precision_with(&[alpha]);
        Ok(self.emit(&[self.id, alpha.id], shape, data, p, Op::Prelu { x: self.id, alpha: alpha.id, axis }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let (shape, data, p) = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (o, d, i) = kernels::split_axis(x.shape(), axis);
            (x.shape().to_vec(), kernels::softmax_forward(x.data(), o, d, i), x.precision())
        };
        Ok(self.emit(&[self.id], shape, data, p, Op::Softmax { x: self.id, axis }))
    }

    /// Normalizes over the last axis with per-feature gain and bias.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (shape, out, xhat, rstd, d) = {
            let x = self.value();
            let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            let (g, b) = (gamma.value(), beta.value());
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("input {:?}, gain {:?}, bias {:?}", x.shape(), g.shape(), b.shape()),
                ));
            }
            let (out, xhat, rstd) = kernels::layer_norm_forward(x.data(), d, g.data(), b.data(), eps);
            (x.shape().to_vec(), out, xhat, rstd, d)
        };
        let p = self.precision_with(&[gamma, beta]);
        Ok(self.emit(
            &[self.id, gamma.id, beta.id],
            shape,
            out,
            p,
            Op::Norm { x: self.id, gamma: gamma.id, beta: beta.id, group: d, channels: 0, xhat, rstd },
        ))
    }

    /// Normalizes each `[H, W]` plane of a `[B, C, H, W]` input, then applies per-channel gain and bias.
    pub fn instance_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (shape, out, xhat, rstd, plane, c) = {
            let x = self.value();
            let (g, b) = (gamma.value(), beta.value());
            if x.rank() != 4 || g.shape() != [x.shape()[1]] || b.shape() != [x.shape()[1]] {
                return Err(Error::shape(
                    "instance_norm",
                    format!("input {:?}, gain {:?}, bias {:?}", x.shape(), g.shape(), b.shape()),
                ));
            }
            let c = x.shape()[1];
            let plane = x.shape()[2] * x.shape()[3];
            let ones = vec![1.0; plane];
            let zeros = vec![0.0; plane];
            let (_, xhat, rstd) = kernels::layer_norm_forward(x.data(), plane, &ones, &zeros, eps);
            let (gv, bv) = (g.data(), b.data());
            let out = xhat
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let ch = (i / plane) % c;
                    h * gv[ch] + bv[ch]
                })
                .collect();
            (x.shape().to_vec(), out, xhat, rstd, plane, c)
        };
        let p = self.precision_with(&[gamma, beta]);
        Ok(self.emit(
            &[self.id, gamma.id, beta.id],
            shape,
            out,
            p,
            Op::Norm { x: self.id, gamma: gamma.id, beta: beta.id, group: plane, channels: c, xhat, rstd },
        ))
    }

    /// Batched matrix product `[..., M, K] x [..., K, N]`; `other` may also be a plain `[K, N]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (shape, data, batch, m, k, n, shared) = {
            let a = self.value();
            let b = other.value();
            let err = || Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
            if a.rank() < 2 || b.rank() < 2 {
                return Err(err());
            }
            let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
            let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
            let batch_dims = &a.shape()[..a.rank() - 2];
            let shared = b.rank() == 2;
            if k != k2 || (!shared && b.shape()[..b.rank() - 2] != *batch_dims) {
                return Err(err());
            }
            let batch: usize = batch_dims.iter().product();
            let data = kernels::matmul(a.data(), b.data(), batch, m, k, n, shared);
            let mut shape = batch_dims.to_vec();
            shape.extend([m, n]);
            (shape, data, batch, m, k, n, shared)
        };
        let p = self.precision_with(&[other]);
        Ok(self.emit(
            &[self.id, other.id],
            shape,
            data,
            p,
            Op::MatMul { a: self.id, b: other.id, batch, m, k, n, b_shared: shared },
        ))
    }

    /// Affine map over the last axis: `x W^T + b` with `W: [out, in]`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let (shape, data, rows, in_dim, out_dim) = {
            let x = self.value();
            let w = weight.value();
            let in_dim = *x.shape().last().unwrap_or(&0);
            if w.rank() != 2 || w.shape()[1] != in_dim || x.rank() == 0 {
                return Err(Error::shape("linear", format!("input {:?}, weight {:?}", x.shape(), w.shape())));
            }
            let out_dim = w.shape()[0];
            let rows = x.numel() / in_dim.max(1);
            let wt = transpose_last2(w.data(), 1, out_dim, in_dim);
            let mut data = kernels::matmul(x.data(), &wt, 1, rows, in_dim, out_dim, false);
            if let Some(bias) = bias {
                let b = bias.value();
                if b.shape() != [out_dim] {
                    return Err(Error::shape("linear", format!("bias {:?} for {out_dim} outputs", b.shape())));
                }
                for r in 0..rows {
                    for (o, bv) in data[r * out_dim..(r + 1) * out_dim].iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = out_dim;
            (shape, data, rows, in_dim, out_dim)
        };
        let mut ins = vec![self.id, weight.id];
        let mut others = vec![weight];
        if let Some(b) = bias {
            ins.push(b.id);
            others.push(b);
        }
        let p = self.precision_with(&others);
        Ok(self.emit(
            &ins,
            shape,
            data,
            p,
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id), rows, in_dim, out_dim },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let (data, p) = {
            let x = self.value();
            if shape.iter().product::<usize>() != x.numel() {
                return Err(Error::shape("reshape", format!("{:?} -> {:?}", x.shape(), shape)));
            }
            (x.data().to_vec(), x.precision())
        };
        Ok(self.emit(&[self.id], shape.to_vec(), data, p, Op::Reshape { x: self.id }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let (shape, data, p) = {
            let x = self.value();
            let mut seen = vec![false; x.rank()];
            if perm.len() != x.rank() || perm.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::shape("permute", format!("{:?} by {:?}", x.shape(), perm)));
            }
            let shape = perm.iter().map(|&a| x.shape()[a]).collect();
            (shape, kernels::permute(x.data(), x.shape(), perm), x.precision())
        };
        Ok(self.emit(&[self.id], shape, data, p, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(inputs: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (shape, data) = {
            let vals: Vec<Ref<'_, Tensor>> = inputs.iter().map(|v| v.value()).collect();
            let s0 = vals[0].shape();
            if axis >= s0.len() {
                return Err(Error::shape("concat", format!("axis {axis} for {:?}", s0)));
            }
            for v in &vals[1..] {
                let s = v.shape();
                let compatible = s.len() == s0.len() && (0..s.len()).all(|i| i == axis || s[i] == s0[i]);
                if !compatible {
                    return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", s0, s)));
                }
            }
            let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let (outer, _, inner) = kernels::split_axis(s0, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let d = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
                }
            }
            let mut shape = s0.to_vec();
            shape[axis] = total;
            (shape, data)
        };
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let p = first.precision_with(inputs);
        Ok(first.emit(&ids, shape, data, p, Op::Concat { inputs: ids.clone(), axis }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let (shape, data, p) = {
            let x = self.value();
            if axis >= x.rank() || start + len > x.shape()[axis] {
                return Err(Error::shape("slice", format!("{:?} axis {axis} [{start}, {})", x.shape(), start + len)));
            }
            let (outer, total, inner) = kernels::split_axis(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            (shape, slice_axis(x.data(), outer, total, inner, start, len), x.precision())
        };
        Ok(self.emit(&[self.id], shape, data, p, Op::Slice { x: self.id, axis, start }))
    }

    pub fn sum(self) -> Var<'g> {
        let (v, p) = {
            let x = self.value();
            (x.data().iter().sum::<f64>(), x.precision())
        };
        self.emit(&[self.id], vec![], vec![v], p, Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'g> {
        let (v, p) = {
            let x = self.value();
            (x.data().iter().sum::<f64>() / x.numel().max(1) as f64, x.precision())
        };
        self.emit(&[self.id], vec![], vec![v], p, Op::Mean { x: self.id })
    }

    /// Splits the last axis in half: `first * sigmoid(second)`.
    pub fn glu(self) -> Result<Var<'g>> {
        let (shape, data, p) = {
            let x = self.value();
            let d = *x.shape().last().unwrap_or(&0);
            if d == 0 || d % 2 != 0 {
                return Err(Error::shape("glu", format!("last axis of {:?} must be even", x.shape())));
            }
            let h = d / 2;
            let xv = x.data();
            let rows = xv.len() / d;
            let mut data = Vec::with_capacity(rows * h);
            for r in 0..rows {
                for j in 0..h {
                    data.push(xv[r * d + j] * kernels::sigmoid(xv[r * d + h + j]));
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = h;
            (shape, data, x.precision())
        };
        Ok(self.emit(&[self.id], shape, data, p, Op::Glu { x: self.id }))
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kH, kW]`.
    pub fn conv2d(self, kernel: Var<'g>, bias: Option<Var<'g>>, opts: Conv2dOptions) -> Result<Var<'g>> {
        let (geom, data) = {
            let x = self.value();
            let w = kernel.value();
            let err = |d: String| Error::shape("conv2d", d);
            if x.rank() != 4 || w.rank() != 4 {
                return Err(err(format!("input {:?}, kernel {:?} must both be rank 4", x.shape(), w.shape())));
            }
            let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, ci2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if ci != ci2 {
                return Err(err(format!("input has {ci} channels, kernel expects {ci2}")));
            }
            let (sh, sw) = opts.stride;
            let (dh, dw) = opts.dilation;
            if sh == 0 || sw == 0 || dh == 0 || dw == 0 {
                return Err(err("stride and dilation must be >= 1".into()));
            }
            let [pt, pb, pl, pr] = opts.padding;
            let span_h = dh * (kh - 1) + 1;
            let span_w = dw * (kw - 1) + 1;
            if h + pt + pb < span_h || wd + pl + pr < span_w {
                return Err(err(format!(
                    "zero-size output: input {h}x{wd} padded ({pt},{pb},{pl},{pr}) smaller than dilated kernel {span_h}x{span_w}"
                )));
            }
            let out_h = (h + pt + pb - span_h) / sh + 1;
            let out_w = (wd + pl + pr - span_w) / sw + 1;
            if let Some(bias) = bias {
                if bias.value().shape() != [co] {
                    return Err(err(format!("bias {:?} for {co} output channels", bias.value().shape())));
                }
            }
            let geom = Conv2dGeometry {
                batch: b,
                in_channels: ci,
                out_channels: co,
                in_h: h,
                in_w: wd,
                out_h,
                out_w,
                kernel: (kh, kw),
                stride: (sh, sw),
                dilation: (dh, dw),
                pad_before: (pt, pl),
            };
            let bias_val = bias.map(|b| b.value());
            let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
            (geom, data)
        };
        let mut ins = vec![self.id, kernel.id];
        let mut others = vec![kernel];
        if let Some(b) = bias {
            ins.push(b.id);
            others.push(b);
        }
        let p = self.precision_with(&others);
        let shape = vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w];
        Ok(self.emit(&ins, shape, data, p, Op::Conv2d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), geom }))
    }

    /// Transposed convolution with kernel `[C_in, C_out, kH, kW]`.
    ///
    /// Output size per axis is `(in - 1) * stride - 2 * padding + kernel + output_padding`.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'g>,
        bias: Option<Var<'g>>,
        stride: (usize, usize),
        padding: (usize, usize),
        output_padding: (usize, usize),
    ) -> Result<Var<'g>> {
        let (geom, data) = {
            let x = self.value();
            let w = kernel.value();
            let err = |d: String| Error::shape("conv_transpose2d", d);
            if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0] {
                return Err(err(format!("input {:?}, kernel {:?}", x.shape(), w.shape())));
            }
            let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
            if h == 0 || wd == 0 || stride.0 == 0 || stride.1 == 0 || output_padding.0 >= stride.0 || output_padding.1 >= stride.1 {
                return Err(err(format!("stride {stride:?}, output padding {output_padding:?}")));
            }
            let full_h = (h - 1) * stride.0 + kh + output_padding.0;
            let full_w = (wd - 1) * stride.1 + kw + output_padding.1;
            if full_h <= 2 * padding.0 || full_w <= 2 * padding.1 {
                return Err(err("zero-size output".into()));
            }
            if let Some(bias) = bias {
                if bias.value().shape() != [co] {
                    return Err(err(format!("bias {:?} for {co} output channels", bias.value().shape())));
                }
            }
            let geom = ConvTransposeGeometry {
                batch: b,
                in_channels: ci,
                out_channels: co,
                in_h: h,
                in_w: wd,
                out_h: full_h - 2 * padding.0,
                out_w: full_w - 2 * padding.1,
                kernel: (kh, kw),
                stride,
                padding,
            };
            let bias_val = bias.map(|b| b.value());
            let data =
                kernels::conv_transpose2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
            (geom, data)
        };
        let mut ins = vec![self.id, kernel.id];
        let mut others = vec![kernel];
        if let Some(b) = bias {
            ins.push(b.id);
            others.push(b);
        }
        let p = self.precision_with(&others);
        let shape = vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w];
        Ok(self.emit(
            &ins,
            shape,
            data,
            p,
            Op::ConvTranspose2d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), geom },
        ))
    }

    /// Per-channel 1-D convolution over the last axis of `[B, C, N]`, "same" zero padding.
    pub fn depthwise_conv1d(self, kernel: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let (dims, k, data) = {
            let x = self.value();
            let w = kernel.value();
            if x.rank() != 3 || w.rank() != 2 || w.shape()[0] != x.shape()[1] || w.shape()[1] % 2 == 0 {
                return Err(Error::shape(
                    "depthwise_conv1d",
                    format!("input {:?}, kernel {:?} (kernel must be [C, odd K])", x.shape(), w.shape()),
                ));
            }
            let dims = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let k = w.shape()[1];
            if let Some(bias) = bias {
                if bias.value().shape() != [dims.1] {
                    return Err(Error::shape("depthwise_conv1d", format!("bias {:?}", bias.value().shape())));
                }
            }
            let bias_val = bias.map(|b| b.value());
            let data = kernels::depthwise_conv1d_forward(dims, k, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
            (dims, k, data)
        };
        let mut ins = vec![self.id, kernel.id];
        let mut others = vec![kernel];
        if let Some(b) = bias {
            ins.push(b.id);
            others.push(b);
        }
        let p = self.precision_with(&others);
        Ok(self.emit(
            &ins,
            vec![dims.0, dims.1, dims.2],
            data,
            p,
            Op::DepthwiseConv1d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), dims, k },
        ))
    }
}
