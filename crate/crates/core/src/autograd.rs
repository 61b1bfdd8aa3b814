//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in construction order, so
//! the node list is always a valid topological order and the backward pass
//! simply walks it in reverse. Backward rules are themselves written in
//! terms of graph operations: with `create_graph = true` the gradient
//! computation is recorded too and can be differentiated again, which is
//! what the R1 penalty needs.
//!
//! ```
//! use dcgn::autograd::Graph;
//! use dcgn::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

use std::collections::BTreeMap;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{self, axis_split, numel_of, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Im2Col { x: Var, k: usize },
    Col2Im { x: Var, k: usize },
    LeakyRelu { x: Var, slope: f64 },
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    SumAxis { x: Var, axis: usize },
    ExpandAxis { x: Var, axis: usize },
    SumAll(Var),
    Broadcast(Var),
    LogSumExp { x: Var, axis: usize },
    AvgPool2(Var),
    Upsample2(Var),
    NarrowLast { x: Var, start: usize },
    PadLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    ScaleGrad { x: Var, factor: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Im2Col { .. } => "im2col",
            Op::Col2Im { .. } => "col2im",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::SumAxis { .. } => "sum_axis",
            Op::ExpandAxis { .. } => "expand_axis",
            Op::SumAll(_) => "sum_all",
            Op::Broadcast(_) => "broadcast",
            Op::LogSumExp { .. } => "logsumexp",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample2(_) => "upsample2",
            Op::NarrowLast { .. } => "narrow_last",
            Op::PadLast { .. } => "pad_last",
            Op::ConcatLast(_) => "concat_last",
            Op::ScaleGrad { .. } => "scale_grad",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Im2Col { x, .. }
            | Op::Col2Im { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Softplus(x)
            | Op::Sigmoid(x)
            | Op::SumAxis { x, .. }
            | Op::ExpandAxis { x, .. }
            | Op::SumAll(x)
            | Op::Broadcast(x)
            | Op::LogSumExp { x, .. }
            | Op::AvgPool2(x)
            | Op::Upsample2(x)
            | Op::NarrowLast { x, .. }
            | Op::PadLast { x, .. }
            | Op::ScaleGrad { x, .. } => vec![*x],
            Op::ConcatLast(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(v, t)| (*v, t))
    }
}

/// A computation graph. Confined to one thread for its lifetime.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; every node is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient (unless the graph is in inference mode).
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_leaf(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if let Some(pos) = first_non_finite(&data) {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
                detail: format!("produced {} at flat index {pos}", data[pos]),
            });
        }
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_raw(shape, data),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        self.push(shape, data, op)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `log(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` on the way back.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Op::ScaleGrad { x, factor }, |v| v)
    }

    /// Matrix product of rank-2 operands, or batched over the leading axis of
    /// rank-3 operands. `ta`/`tb` transpose the last two axes of the stored
    /// operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, ar, ac, br, bc) = match (sa.as_slice(), sb.as_slice()) {
            (&[r1, c1], &[r2, c2]) => (1, r1, c1, r2, c2),
            (&[n1, r1, c1], &[n2, r2, c2]) if n1 == n2 => (n1, r1, c1, r2, c2),
            _ => return Err(shape_err!("matmul operands {sa:?} and {sb:?}")),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!("matmul inner dims {sa:?}{} x {sb:?}{}", tstr(ta), tstr(tb)));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                tensor::gemm(
                    &x[i * m * k..(i + 1) * m * k],
                    ta,
                    &y[i * k * n..(i + 1) * k * n],
                    tb,
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(shape, out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel_of(shape) != t.numel() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", t.shape()));
        }
        let data = t.to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x))
    }

    fn nhwc(&self, x: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, h, w, c] => Ok([n, h, w, c]),
            ref s => Err(shape_err!("{what} expects N×H×W×C, got {s:?}")),
        }
    }

    /// `k×k` zero-padded neighbourhoods as rows: `N×H×W×C → (N·H·W)×(k·k·C)`.
    pub fn im2col(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "im2col")?;
        if k % 2 == 0 {
            return Err(shape_err!("window size {k} must be odd"));
        }
        let data = tensor::im2col(self.value(x).data(), n, h, w, c, k);
        self.push(vec![n * h * w, k * k * c], data, Op::Im2Col { x, k })
    }

    /// Adjoint of [`Graph::im2col`] producing an `out_shape = N×H×W×C` tensor.
    pub fn col2im(&mut self, x: Var, out_shape: [usize; 4], k: usize) -> Result<Var> {
        let [n, h, w, c] = out_shape;
        if self.shape(x) != [n * h * w, k * k * c] {
            return Err(shape_err!("col2im {:?} into {out_shape:?}", self.shape(x)));
        }
        let data = tensor::col2im(self.value(x).data(), n, h, w, c, k);
        self.push(out_shape.to_vec(), data, Op::Col2Im { x, k })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum axis {axis} for shape {shape:?}"));
        }
        let (o, l, i) = axis_split(&shape, axis);
        let data = tensor::sum_axis(self.value(x).data(), o, l, i);
        let mut out = shape;
        out.remove(axis);
        self.push(out, data, Op::SumAxis { x, axis })
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the values.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(shape_err!("expand axis {axis} for shape {shape:?}"));
        }
        shape.insert(axis, n);
        let (o, l, i) = axis_split(&shape, axis);
        let data = tensor::expand_axis(self.value(x).data(), o, l, i);
        self.push(shape, data, Op::ExpandAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(contract_err!("mean of an empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).item()?;
        self.push(shape.to_vec(), vec![v; numel_of(shape)], Op::Broadcast(x))
    }

    /// Stable `log Σ exp` over `axis`, removing that axis.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("logsumexp axis {axis} for shape {shape:?}"));
        }
        let (o, l, i) = axis_split(&shape, axis);
        let data = tensor::logsumexp_axis(self.value(x).data(), o, l, i);
        let mut out = shape;
        out.remove(axis);
        self.push(out, data, Op::LogSumExp { x, axis })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 on odd spatial size {h}×{w}"));
        }
        let data = tensor::avg_pool2(self.value(x).data(), n, h, w, c);
        self.push(vec![n, h / 2, w / 2, c], data, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "upsample2")?;
        let data = tensor::upsample2(self.value(x).data(), n, h, w, c);
        self.push(vec![n, h * 2, w * 2, c], data, Op::Upsample2(x))
    }

    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow_last(start, len)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.to_vec(), Op::NarrowLast { x, start })
    }

    /// Embeds `x` at channel offset `start` of a zero tensor with `total`
    /// channels.
    pub fn pad_last(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err!("pad on scalar"))?;
        if start + len > total {
            return Err(shape_err!("pad {start}+{len} exceeds {total}"));
        }
        let rows = self.value(x).numel() / len.max(1);
        let data = tensor::pad_last(self.value(x).data(), rows, len, start, total);
        *shape.last_mut().unwrap() = total;
        self.push(shape, data, Op::PadLast { x, start })
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
        let lead = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err!("concat {:?} with {s:?}", self.shape(first)));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel_of(&lead);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(shape, data, Op::ConcatLast(parts.to_vec()))
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`, as graph
    /// variables. With `create_graph` the backward computation is recorded and
    /// the returned variables are themselves differentiable. Inputs that do not
    /// influence `output` get `None`.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        if self.value(output).numel() != 1 {
            return Err(contract_err!(
                "backward from non-scalar output of shape {:?}",
                self.shape(output)
            ));
        }
        let saved = self.grad_enabled;
        self.grad_enabled = create_graph;
        let result = self.run_backward(output);
        self.grad_enabled = saved;
        let grads = result?;
        Ok(wrt.iter().map(|v| grads.get(v.0).copied().flatten()).collect())
    }

    fn run_backward(&mut self, output: Var) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = Tensor::full(self.shape(output), 1.0);
        grads[output.0] = Some(self.constant(seed));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let contributions = self.backward_op(Var(id), &op, g).map_err(|e| match e {
                Error::Numeric { op: inner, detail, .. } => Error::Numeric {
                    node: id,
                    op: op.name(),
                    detail: format!("backward produced non-finite values via {inner}: {detail}"),
                },
                other => other,
            })?;
            for (input, gi) in contributions {
                let slot = &mut grads[input.0];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, gi)?,
                    None => gi,
                });
            }
        }
        Ok(grads)
    }

    fn backward_op(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let need = |s: &Self, v: Var| s.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(self, a) {
                    res.push((a, g));
                }
                if need(self, b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(self, a) {
                    res.push((a, g));
                }
                if need(self, b) {
                    res.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if need(self, a) {
                    res.push((a, self.mul(g, b)?));
                }
                if need(self, b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Neg(x) => res.push((x, self.neg(g)?)),
            Op::Scale(x, c) => res.push((x, self.scale(g, c)?)),
            Op::AddScalar(x) => res.push((x, g)),
            Op::ScaleGrad { x, factor } => res.push((x, self.scale(g, factor)?)),
            Op::MatMul { a, b, ta, tb } => {
                if need(self, a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    res.push((a, ga));
                }
                if need(self, b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                res.push((x, self.reshape(g, &shape)?));
            }
            Op::Im2Col { x, k } => {
                let [n, h, w, c] = self.nhwc(x, "im2col")?;
                res.push((x, self.col2im(g, [n, h, w, c], k)?));
            }
            Op::Col2Im { x, k } => res.push((x, self.im2col(g, k)?)),
            Op::LeakyRelu { x, slope } => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                res.push((x, self.mul(g, m)?));
            }
            Op::Tanh(x) => {
                let sq = self.mul(out, out)?;
                let neg = self.neg(sq)?;
                let d = self.add_scalar(neg, 1.0)?;
                res.push((x, self.mul(g, d)?));
            }
            Op::Exp(x) => res.push((x, self.mul(g, out)?)),
            Op::Softplus(x) => {
                let s = self.sigmoid(x)?;
                res.push((x, self.mul(g, s)?));
            }
            Op::Sigmoid(x) => {
                let neg = self.neg(out)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((x, self.mul(g, d)?));
            }
            Op::SumAxis { x, axis } => {
                let n = self.shape(x)[axis];
                res.push((x, self.expand_axis(g, axis, n)?));
            }
            Op::ExpandAxis { x, axis } => res.push((x, self.sum_axis(g, axis)?)),
            Op::SumAll(x) => {
                let shape = self.shape(x).to_vec();
                res.push((x, self.broadcast(g, &shape)?));
            }
            Op::Broadcast(x) => {
                let shape = self.shape(x).to_vec();
                let s = self.sum_all(g)?;
                res.push((x, self.reshape(s, &shape)?));
            }
            Op::LogSumExp { x, axis } => {
                let n = self.shape(x)[axis];
                let ge = self.expand_axis(g, axis, n)?;
                let ye = self.expand_axis(out, axis, n)?;
                let centered = self.sub(x, ye)?;
                let soft = self.exp(centered)?;
                res.push((x, self.mul(ge, soft)?));
            }
            Op::AvgPool2(x) => {
                let up = self.upsample2(g)?;
                res.push((x, self.scale(up, 0.25)?));
            }
            Op::Upsample2(x) => {
                let down = self.avg_pool2(g)?;
                res.push((x, self.scale(down, 4.0)?));
            }
            Op::NarrowLast { x, start } => {
                let total = *self.shape(x).last().unwrap();
                res.push((x, self.pad_last(g, start, total)?));
            }
            Op::PadLast { x, start } => {
                let len = *self.shape(x).last().unwrap();
                res.push((x, self.narrow_last(g, start, len)?));
            }
            Op::ConcatLast(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if need(self, p) {
                        res.push((p, self.narrow_last(g, offset, w)?));
                    }
                    offset += w;
                }
            }
        }
        Ok(res)
    }

    /// Gradients of a scalar with respect to every differentiable leaf created
    /// so far. Nodes added during the pass are discarded afterwards.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let mark = self.nodes.len();
        let leaves: Vec<Var> = (0..=output.0)
            .filter(|&i| self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect();
        let grads = self.grad(output, &leaves, false);
        let map = grads.map(|grads| {
            leaves
                .iter()
                .zip(grads)
                .map(|(&leaf, gv)| {
                    let t = match gv {
                        Some(gv) => self.value(gv).clone(),
                        None => Tensor::zeros(self.shape(leaf)),
                    };
                    (leaf, t)
                })
                .collect()
        });
        self.nodes.truncate(mark);
        Ok(Gradients { map: map? })
    }
}

fn first_non_finite(data: &[f64]) -> Option<usize> {
    // x·0 is 0 for finite x and NaN otherwise.
    let mut acc = [0.0f64; 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v * 0.0;
        }
    }
    let clean = acc.iter().chain(tail).all(|v| v.is_finite());
    if clean {
        None
    } else {
        data.iter().position(|v| !v.is_finite())
    }
}

fn tstr(t: bool) -> &'static str {
    if t {
        "ᵀ"
    } else {
        ""
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
