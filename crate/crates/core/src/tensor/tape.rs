use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::{mismatch, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Recorded operation. Node ids refer to earlier entries of the tape.
enum Op {
    Leaf,
    /// Result of an op whose inputs carry no gradient; nothing to replay.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    AddBias { x: usize, b: usize, axis: usize },
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    SoftmaxRows(usize),
    Conv1d { x: usize, w: usize, dilation: usize },
    Conv2d { x: usize, w: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Variance(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run gradient tape. Nodes are appended in execution order, so the
/// tape is always topologically sorted and a reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can be reused for another forward pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, inputs: &[usize], op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(value, true, op)
        } else {
            self.push(value, false, Op::Const)
        }
    }

    /// Reverse sweep from a scalar `loss`. A tape supports a single backward
    /// pass; call [`Tape::reset`] before recording again.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(TensorError::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        let mut out: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                // Reachable-but-unused leaves still report a zero gradient.
                if matches!(node.op, Op::Leaf) {
                    out[id] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                out[id] = Some(Tensor::from_op("backward", node.value.shape().to_vec(), g)?);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Broadcast lookup: one-element operands act as scalars.
#[inline]
fn bget(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Reduces a full-size gradient onto an operand that may have been broadcast.
fn reduce_to(operand_len: usize, full: Vec<f64>) -> Vec<f64> {
    if operand_len == 1 && full.len() != 1 {
        vec![full.iter().sum()]
    } else {
        full
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.data();
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if need(*a) {
                accumulate(grads, nodes, *a, reduce_to(val(*a).len(), g.to_vec()));
            }
            if need(*b) {
                let gb = g.iter().map(|v| sign * v).collect();
                accumulate(grads, nodes, *b, reduce_to(val(*b).len(), gb));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if need(*a) {
                let ga = g.iter().enumerate().map(|(i, gv)| gv * bget(bv, i)).collect();
                accumulate(grads, nodes, *a, reduce_to(av.len(), ga));
            }
            if need(*b) {
                let gb = g.iter().enumerate().map(|(i, gv)| gv * bget(av, i)).collect();
                accumulate(grads, nodes, *b, reduce_to(bv.len(), gb));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if need(*a) {
                let ga = g.iter().enumerate().map(|(i, gv)| gv / bget(bv, i)).collect();
                accumulate(grads, nodes, *a, reduce_to(av.len(), ga));
            }
            if need(*b) {
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        let d = bget(bv, i);
                        -gv * bget(av, i) / (d * d)
                    })
                    .collect();
                accumulate(grads, nodes, *b, reduce_to(bv.len(), gb));
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::AddBias { x, b, axis } => {
            if need(*x) {
                accumulate(grads, nodes, *x, g.to_vec());
            }
            if need(*b) {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gb = vec![0.0; len];
                for o in 0..outer {
                    for (j, gbj) in gb.iter_mut().enumerate() {
                        let base = (o * len + j) * inner;
                        *gbj += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].value.dims2().expect("matmul lhs");
            let n = nodes[*b].value.shape()[1];
            if need(*a) {
                accumulate(grads, nodes, *a, kernels::matmul_nt(g, val(*b), m, n, k));
            }
            if need(*b) {
                accumulate(grads, nodes, *b, kernels::matmul_tn(val(*a), g, m, k, n));
            }
        }
        Op::Transpose(x) => {
            let (m, n) = nodes[*x].value.dims2().expect("transpose input");
            accumulate(grads, nodes, *x, kernels::transpose(g, n, m));
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(val(*x))
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::SoftmaxRows(x) => {
            let y = node.value.data();
            let n = *node.value.shape().last().expect("softmax rank");
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Conv1d { x, w, dilation } => {
            let xs = nodes[*x].value.shape();
            let ws = nodes[*w].value.shape();
            let geom = Conv1dGeom {
                c_in: xs[0],
                c_out: ws[0],
                kernel: ws[2],
                time: xs[1],
                dilation: *dilation,
            };
            let (gx, gw) = kernels::conv1d_causal_backward(val(*x), val(*w), g, geom);
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *w, gw);
        }
        Op::Conv2d { x, w } => {
            let xs = nodes[*x].value.shape();
            let ws = nodes[*w].value.shape();
            let geom = Conv2dGeom {
                batch: xs[0],
                c_in: xs[1],
                c_out: ws[0],
                height: xs[2],
                width: xs[3],
                kh: ws[2],
                kw: ws[3],
            };
            let (gx, gw) = kernels::conv2d_same_backward(val(*x), val(*w), g, geom, need(*x));
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            accumulate(grads, nodes, *w, gw);
        }
        Op::MaxPool2 { x, argmax } => {
            let mut gx = vec![0.0; val(*x).len()];
            for (gv, &src) in g.iter().zip(argmax) {
                gx[src] += gv;
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::GlobalAvgPool(x) => {
            let xs = nodes[*x].value.shape();
            let plane = xs[2] * xs[3];
            let scale = 1.0 / plane as f64;
            let mut gx = Vec::with_capacity(val(*x).len());
            for gv in g {
                gx.extend(std::iter::repeat(gv * scale).take(plane));
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let widths: Vec<usize> = parts
                .iter()
                .map(|&p| nodes[p].value.shape()[*axis] * inner)
                .collect();
            let total: usize = widths.iter().sum();
            for (pi, &p) in parts.iter().enumerate() {
                if !need(p) {
                    continue;
                }
                let offset: usize = widths[..pi].iter().sum();
                let mut gp = Vec::with_capacity(outer * widths[pi]);
                for o in 0..outer {
                    let base = o * total + offset;
                    gp.extend_from_slice(&g[base..base + widths[pi]]);
                }
                accumulate(grads, nodes, p, gp);
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, full, inner) = axis_split(xs, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![0.0; val(*x).len()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * full + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Sum(x) => {
            let n = val(*x).len();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::Variance(x) => {
            let xv = val(*x);
            let n = xv.len() as f64;
            let mean = xv.iter().sum::<f64>() / n;
            let gx = xv.iter().map(|v| g[0] * 2.0 * (v - mean) / n).collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = val(*gamma).len();
            let gam = val(*gamma);
            if need(*gamma) {
                let mut gg = vec![0.0; d];
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                        *acc += gv * xv;
                    }
                }
                accumulate(grads, nodes, *gamma, gg);
            }
            if need(*beta) {
                let mut gb = vec![0.0; d];
                for gr in g.chunks(d) {
                    for (acc, gv) in gb.iter_mut().zip(gr) {
                        *acc += gv;
                    }
                }
                accumulate(grads, nodes, *beta, gb);
            }
            if need(*x) {
                let mut gx = vec![0.0; g.len()];
                let dn = d as f64;
                for (((gr, xr), out), &istd) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .zip(inv_std)
                {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        sum_g += gh;
                        sum_gx += gh * xr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        out[j] = istd / dn * (dn * gh - sum_g - xr[j] * sum_gx);
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
        }
    }
}

enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element node.
    pub fn item(&self) -> Option<f64> {
        self.value().item()
    }

    fn check_same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op,
                detail: "operands recorded on different tapes".into(),
            })
        }
    }

    fn binary(self, rhs: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        self.check_same_tape(&rhs, name)?;
        let out = {
            let (a, b) = (self.value(), rhs.value());
            let shape = if a.shape() == b.shape() || b.numel() == 1 {
                a.shape().to_vec()
            } else if a.numel() == 1 {
                b.shape().to_vec()
            } else {
                return Err(mismatch(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            };
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let (x, y) = (bget(ad, i), bget(bd, i));
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                        Binary::Div => x / y,
                    }
                })
                .collect();
            Tensor::from_op(name, shape, data)?
        };
        let (a, b) = (self.id, rhs.id);
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        Ok(self.tape.record(out, &[a, b], op))
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Div)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let data = x.data().iter().map(|v| v + c).collect();
            Tensor::from_op("add_scalar", x.shape().to_vec(), data)?
        };
        Ok(self.tape.record(out, &[self.id], Op::AddScalar(self.id)))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let data = x.data().iter().map(|v| v * c).collect();
            Tensor::from_op("scale", x.shape().to_vec(), data)?
        };
        Ok(self.tape.record(out, &[self.id], Op::Scale(self.id, c)))
    }

    /// Adds the rank-1 `bias` along `axis`, broadcasting over every other axis.
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.check_same_tape(&bias, "add_bias")?;
        let out = {
            let (x, b) = (self.value(), bias.value());
            if axis >= x.rank() || b.rank() != 1 || b.numel() != x.shape()[axis] {
                return Err(mismatch(
                    "add_bias",
                    format!("bias {:?} on axis {axis} of {:?}", b.shape(), x.shape()),
                ));
            }
            let (outer, len, inner) = axis_split(x.shape(), axis);
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for (j, bv) in b.data().iter().enumerate() {
                    let base = (o * len + j) * inner;
                    for v in &mut data[base..base + inner] {
                        *v += bv;
                    }
                }
            }
            Tensor::from_op("add_bias", x.shape().to_vec(), data)?
        };
        Ok(self.tape.record(
            out,
            &[self.id, bias.id],
            Op::AddBias {
                x: self.id,
                b: bias.id,
                axis,
            },
        ))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&rhs, "matmul")?;
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.tape.record(out, &[self.id, rhs.id], Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose2()?;
        Ok(self.tape.record(out, &[self.id], Op::Transpose(self.id)))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let data = x.data().iter().map(|v| v.max(0.0)).collect();
            Tensor::from_op("relu", x.shape().to_vec(), data)?
        };
        Ok(self.tape.record(out, &[self.id], Op::Relu(self.id)))
    }

    /// Softmax over the last axis, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let n = *x
                .shape()
                .last()
                .ok_or_else(|| mismatch("softmax_rows", "rank-0 input"))?;
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::from_op("softmax_rows", x.shape().to_vec(), data)?
        };
        Ok(self.tape.record(out, &[self.id], Op::SoftmaxRows(self.id)))
    }

    /// Causal dilated convolution of `self: [C_in × T]` with
    /// `weight: [C_out × C_in × K]`. Output is `[C_out × T]`; the input is
    /// implicitly left-padded with `(K − 1)·dilation` zeros.
    pub fn conv1d_causal(self, weight: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        self.check_same_tape(&weight, "conv1d_causal")?;
        if dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d_causal",
                detail: "dilation must be at least 1".into(),
            });
        }
        let out = {
            let (x, w) = (self.value(), weight.value());
            let (c_in, time) = x
                .dims2()
                .ok_or_else(|| mismatch("conv1d_causal", "input must be [C_in x T]"))?;
            let ws = w.shape();
            if ws.len() != 3 || ws[1] != c_in {
                return Err(mismatch(
                    "conv1d_causal",
                    format!("weight {ws:?} for input channels {c_in}"),
                ));
            }
            let geom = Conv1dGeom {
                c_in,
                c_out: ws[0],
                kernel: ws[2],
                time,
                dilation,
            };
            let data = kernels::conv1d_causal(x.data(), w.data(), geom);
            Tensor::from_op("conv1d_causal", vec![ws[0], time], data)?
        };
        Ok(self.tape.record(
            out,
            &[self.id, weight.id],
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                dilation,
            },
        ))
    }

    /// Stride-1 zero-padded ("same") convolution of `self: [N × C × H × W]`
    /// with `weight: [C_out × C × kh × kw]` (odd kernel sizes).
    pub fn conv2d(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&weight, "conv2d")?;
        let out = {
            let (x, w) = (self.value(), weight.value());
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] % 2 == 0 || ws[3] % 2 == 0
            {
                return Err(mismatch("conv2d", format!("input {xs:?}, weight {ws:?}")));
            }
            let geom = Conv2dGeom {
                batch: xs[0],
                c_in: xs[1],
                c_out: ws[0],
                height: xs[2],
                width: xs[3],
                kh: ws[2],
                kw: ws[3],
            };
            let data = kernels::conv2d_same(x.data(), w.data(), geom);
            Tensor::from_op("conv2d", vec![xs[0], ws[0], xs[2], xs[3]], data)?
        };
        Ok(self.tape.record(
            out,
            &[self.id, weight.id],
            Op::Conv2d {
                x: self.id,
                w: weight.id,
            },
        ))
    }

    /// 2×2 stride-2 max pooling over the last two axes of `[N × C × H × W]`.
    pub fn maxpool2(self) -> Result<Var<'t>> {
        let (out, argmax) = {
            let x = self.value();
            let xs = x.shape();
            if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
                return Err(mismatch("maxpool2", format!("input {xs:?}")));
            }
            let (vals, arg) = kernels::maxpool2(x.data(), xs[0] * xs[1], xs[2], xs[3]);
            let t = Tensor::from_op("maxpool2", vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2], vals)?;
            (t, arg)
        };
        Ok(self
            .tape
            .record(out, &[self.id], Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Mean over the spatial axes: `[N × C × H × W] → [N × C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let xs = x.shape();
            if xs.len() != 4 {
                return Err(mismatch("global_avg_pool", format!("input {xs:?}")));
            }
            let plane = xs[2] * xs[3];
            let data = x
                .data()
                .chunks(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            Tensor::from_op("global_avg_pool", vec![xs[0], xs[1]], data)?
        };
        Ok(self.tape.record(out, &[self.id], Op::GlobalAvgPool(self.id)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| mismatch("concat", "no operands"))?;
        for p in parts {
            first.check_same_tape(p, "concat")?;
        }
        let out = {
            let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let base = values[0].shape();
            if axis >= base.len() {
                return Err(mismatch("concat", format!("axis {axis} for {base:?}")));
            }
            let mut shape = base.to_vec();
            shape[axis] = 0;
            for v in &values {
                let s = v.shape();
                let ok = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(mismatch("concat", format!("{s:?} vs {base:?} on axis {axis}")));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &values {
                    let w = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::from_op("concat", shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first
            .tape
            .record(out, &ids, Op::Concat { parts: ids.clone(), axis }))
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let xs = x.shape();
            if axis >= xs.len() || len == 0 || start + len > xs[axis] {
                return Err(mismatch(
                    "narrow",
                    format!("[{start}, {}) on axis {axis} of {xs:?}", start + len),
                ));
            }
            let (outer, full, inner) = axis_split(xs, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&x.data()[s..s + len * inner]);
            }
            let mut shape = xs.to_vec();
            shape[axis] = len;
            Tensor::from_op("narrow", shape, data)?
        };
        Ok(self.tape.record(
            out,
            &[self.id],
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshaped(shape)?;
        Ok(self.tape.record(out, &[self.id], Op::Reshape(self.id)))
    }

    fn reduce(self, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'t>> {
        let out = Tensor::from_op("reduce", vec![], vec![f(self.value().data())])?;
        Ok(self.tape.record(out, &[self.id], op))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(Op::Sum(self.id), |d| d.iter().sum())
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(Op::Mean(self.id), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Population (1/N) variance over all elements.
    pub fn variance(self) -> Result<Var<'t>> {
        self.reduce(Op::Variance(self.id), |d| {
            let n = d.len() as f64;
            let m = d.iter().sum::<f64>() / n;
            d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.check_same_tape(&gamma, "layer_norm")?;
        self.check_same_tape(&beta, "layer_norm")?;
        let (out, xhat, inv_std) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let d = *x
                .shape()
                .last()
                .ok_or_else(|| mismatch("layer_norm", "rank-0 input"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(mismatch(
                    "layer_norm",
                    format!("gamma {:?}, beta {:?} for width {d}", g.shape(), b.shape()),
                ));
            }
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.numel() / d);
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std.push(istd);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * istd;
                    xhat.push(h);
                    data.push(h * g.data()[j] + b.data()[j]);
                }
            }
            let t = Tensor::from_op("layer_norm", x.shape().to_vec(), data)?;
            (t, xhat, inv_std)
        };
        Ok(self.tape.record(
            out,
            &[self.id, gamma.id, beta.id],
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Affine map `self · weight + bias` for `self: [m × k]`, `weight: [k × n]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_bias(bias, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(i2.matmul(a).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.matmul(b).unwrap().value().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 0.0, 3f64.ln(), 1000.0, 1000.0]));
        let y = x.softmax_rows().unwrap();
        let y = y.value();
        let d = y.data();
        assert_eq!(&d[0..2], &[0.5, 0.5]);
        assert!((d[2] - 0.25).abs() < 1e-15 && (d[3] - 0.75).abs() < 1e-15);
        assert_eq!(&d[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn conv1d_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        assert_eq!(x.conv1d_causal(w, 1).unwrap().value().data(), &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(x.conv1d_causal(w, 2).unwrap().value().data(), &[1.0, 2.0, 4.0, 6.0]);
        let w1 = tape.constant(t(&[1, 1, 1], &[1.0]));
        assert_eq!(x.conv1d_causal(w1, 3).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 2, 1]));
        assert!(x.conv1d_causal(bad, 1).is_err());
        assert!(x.conv1d_causal(w, 0).is_err());
    }

    #[test]
    fn backward_square_sum() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::scalar(4.0).unwrap());
        let _unused = x.scale(2.0).unwrap();
        let loss = c.add_scalar(1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 3]);
        assert_eq!(gx, vec![0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::DoubleBackward);
    }

    #[test]
    fn reset_allows_reuse() {
        let mut tape = Tape::new();
        {
            let x = tape.param(t(&[1], &[2.0]));
            let l = x.sum().unwrap();
            tape.backward(l).unwrap();
        }
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.param(t(&[1], &[2.0]));
        let l = x.mul(x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_finite_rejected_at_creation() {
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let r = Var::concat(&[a, a], 0).unwrap();
        assert_eq!(r.shape(), vec![4, 2]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.value().data(), &[5.0, 6.0]);
    }
}
