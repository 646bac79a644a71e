use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::linalg;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every operation the tape can record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    ReduceSum,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Sqrt,
    Square,
    Sin,
    Cos,
    Softplus,
    Neg,
    ScalarMul(f64),
    Concat(usize),
    SumAxis(usize),
    CumProdExclusive,
    SolveSpd,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Sqrt,
    Square,
    Sin,
    Cos,
    Softplus,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: Binary, a: NodeId, b: NodeId },
    Unary { kind: Unary, a: NodeId },
    Scale { a: NodeId, c: f64 },
    Offset { a: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Sum { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Reshape { a: NodeId },
    CumProd { a: NodeId },
    SolveSpd { a: NodeId, b: NodeId, chol: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Inputs always precede their consumers, so a single reverse sweep over the
/// node list visits every node once in a valid order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar root with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(NodeId, Tensor)> {
        self.entries.iter()
    }

    /// Gradients in parameter registration order.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, t)| t).collect()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    // A single-element operand takes the other's shape; between two of them
    // the higher rank wins.
    if numel(a) == 1 && (numel(b) != 1 || b.len() >= a.len()) {
        return Some(b.to_vec());
    }
    if numel(b) == 1 {
        return Some(a.to_vec());
    }
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index into an input of shape `inp`
/// broadcast against it.
fn broadcast_map(inp: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if numel(inp) == 1 {
        return vec![0; n];
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if inp[d] == 1 { 0 } else { s };
        s *= inp[d];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
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

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Binary { a, b, .. } | Op::MatMul { a, b } | Op::SolveSpd { a, b, .. } => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Concat { inputs, .. } => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Offset { a }
            | Op::Transpose { a }
            | Op::Sum { a }
            | Op::SumAxis { a, .. }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::CumProd { a } => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a differentiable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.nodes[id.0].needs_grad = true;
        self.params.push(id);
        id
    }

    /// Generic dispatcher over [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul | OpKind::SolveSpd => 2,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidParam(format!("{kind} expects {arity} inputs, got {}", inputs.len())));
        }
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Div => self.div(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::SolveSpd => self.solve_spd(inputs[0], inputs[1]),
            OpKind::Transpose => self.transpose(inputs[0]),
            OpKind::ReduceSum => Ok(self.sum(inputs[0])),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Tanh => Ok(self.tanh(inputs[0])),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Sqrt => self.sqrt(inputs[0]),
            OpKind::Square => Ok(self.square(inputs[0])),
            OpKind::Sin => Ok(self.sin(inputs[0])),
            OpKind::Cos => Ok(self.cos(inputs[0])),
            OpKind::Softplus => Ok(self.softplus(inputs[0])),
            OpKind::Neg => Ok(self.neg(inputs[0])),
            OpKind::ScalarMul(c) => Ok(self.scale(inputs[0], c)),
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::SumAxis(axis) => self.sum_axis(inputs[0], axis),
            OpKind::CumProdExclusive => Ok(self.cumprod_exclusive(inputs[0])),
        }
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, &[sa, sb]))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(sa, &out_shape);
            let mb = broadcast_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok(self.push(Op::Binary { kind, a, b }, Tensor::new(out_shape, data)?))
    }

    /// Elementwise sum; a single-element operand or unit dimensions broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let x = self.value(a);
        let y = match kind {
            Unary::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Log => x.map(f64::ln),
            Unary::Exp => x.map(f64::exp),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Square => x.map(|v| v * v),
            Unary::Sin => x.map(f64::sin),
            Unary::Cos => x.map(f64::cos),
            Unary::Softplus => x.map(softplus),
            Unary::Neg => x.map(|v| -v),
        };
        self.push(Op::Unary { kind, a }, y)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain { op: "log", detail: format!("input {v}") });
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    /// Square root; negative entries are a domain error.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain { op: "sqrt", detail: format!("input {v}") });
        }
        Ok(self.unary(Unary::Sqrt, a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Square, a)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Cos, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Softplus, a)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.value(a).map(|v| c * v);
        self.push(Op::Scale { a, c }, y)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.value(a).map(|v| v + c);
        self.push(Op::Offset { a }, y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { a }, Tensor::new(vec![c, r], out)?))
    }

    /// Sum of all entries, as a shape-`[1]` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    /// Sums over `axis`, keeping it as a unit dimension.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", &[&s]));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * dim + d) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        Ok(self.push(Op::SumAxis { a, axis }, Tensor::new(shape, out)?))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| Error::InvalidParam("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut total = 0;
        for id in inputs {
            let s = self.shape(*id);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                let shapes: Vec<&[usize]> = inputs.iter().map(|i| self.shape(*i)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let x = self.value(*id).data();
                let dim = self.shape(*id)[axis];
                out.extend_from_slice(&x[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, Tensor::new(shape, out)?))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Shape { op: "slice", shapes: vec![s, vec![start, end]] });
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * dim + start) * inner..(o * dim + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(Op::Slice { a, axis, start }, Tensor::new(shape, out)?))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if numel(s) != numel(shape) {
            return Err(Error::shape("reshape", &[s, shape]));
        }
        let value = self.value(a).clone().with_shape(shape.to_vec());
        Ok(self.push(Op::Reshape { a }, value))
    }

    /// Exclusive running product: `n` inputs give `n + 1` outputs
    /// `[1, x0, x0*x1, ..., x0*...*x(n-1)]`, returned as a vector.
    pub fn cumprod_exclusive(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(x.len() + 1);
        let mut p = 1.0;
        out.push(p);
        for &v in x {
            p *= v;
            out.push(p);
        }
        self.push(Op::CumProd { a }, Tensor::vector(out))
    }

    /// `X = S^{-1} B` with `S = (A + A^T)/2` factored by Cholesky.
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa[0] != sa[1] || sb.len() != 2 || sb[0] != sa[0] {
            return Err(Error::shape("solve_spd", &[sa, sb]));
        }
        let (n, m) = (sb[0], sb[1]);
        let av = self.value(a).data();
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (av[i * n + j] + av[j * n + i]);
            }
        }
        let chol = linalg::cholesky(n, &sym)?;
        let mut x = self.value(b).data().to_vec();
        linalg::cholesky_solve(n, &chol, &mut x, m);
        Ok(self.push(Op::SolveSpd { a, b, chol }, Tensor::new(vec![n, m], x)?))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every registered parameter gets an entry, zero when the root does not
    /// depend on it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rs, 1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
            match &mut grads[id.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |id: &NodeId| self.nodes[id.0].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary { kind, a, b } => {
                    let (xa, xb) = (self.value(*a), self.value(*b));
                    let out_shape = node.value.shape();
                    let same = xa.shape() == out_shape && xb.shape() == out_shape;
                    let (ma, mb) = if same {
                        (None, None)
                    } else {
                        (Some(broadcast_map(xa.shape(), out_shape)), Some(broadcast_map(xb.shape(), out_shape)))
                    };
                    let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                    let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                    let (da, db) = (xa.data(), xb.data());
                    if need(a) {
                        let mut ga = Tensor::zeros(xa.shape());
                        let gd = ga.data_mut();
                        for (k, &gk) in g.data().iter().enumerate() {
                            gd[ia(k)] += match kind {
                                Binary::Add | Binary::Sub => gk,
                                Binary::Mul => gk * db[ib(k)],
                                Binary::Div => gk / db[ib(k)],
                            };
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if need(b) {
                        let mut gb = Tensor::zeros(xb.shape());
                        let gd = gb.data_mut();
                        for (k, &gk) in g.data().iter().enumerate() {
                            let y = db[ib(k)];
                            gd[ib(k)] += match kind {
                                Binary::Add => gk,
                                Binary::Sub => -gk,
                                Binary::Mul => gk * da[ia(k)],
                                Binary::Div => -gk * da[ia(k)] / (y * y),
                            };
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Unary { kind, a } => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| {
                            let d = match kind {
                                Unary::Relu => {
                                    if x[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[k] * (1.0 - y[k]),
                                Unary::Tanh => 1.0 - y[k] * y[k],
                                Unary::Log => 1.0 / x[k],
                                Unary::Exp => y[k],
                                Unary::Sqrt => 0.5 / y[k],
                                Unary::Square => 2.0 * x[k],
                                Unary::Sin => x[k].cos(),
                                Unary::Cos => -x[k].sin(),
                                Unary::Softplus => sigmoid(x[k]),
                                Unary::Neg => -1.0,
                            };
                            gk * d
                        })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(self.shape(*a).to_vec(), data)?);
                }
                Op::Scale { a, c } => acc(&mut grads, *a, g.map(|v| c * v)),
                Op::Offset { a } => acc(&mut grads, *a, g),
                Op::MatMul { a, b } => {
                    let (xa, xb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (xa.rows(), xa.cols(), xb.cols());
                    if need(a) {
                        let mut ga = vec![0.0; m * k];
                        linalg::gemm(m, n, k, g.data(), false, xb.data(), true, 0.0, &mut ga);
                        acc(&mut grads, *a, Tensor::new(vec![m, k], ga)?);
                    }
                    if need(b) {
                        let mut gb = vec![0.0; k * n];
                        linalg::gemm(k, m, n, xa.data(), true, g.data(), false, 0.0, &mut gb);
                        acc(&mut grads, *b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = (g.rows(), g.cols());
                    let gd = g.data();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = gd[i * c + j];
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(vec![c, r], out)?);
                }
                Op::Sum { a } => acc(&mut grads, *a, Tensor::full(self.shape(*a), g.item())),
                Op::SumAxis { a, axis } => {
                    let s = self.shape(*a);
                    let (outer, dim, inner) = split_axis(s, *axis);
                    let gd = g.data();
                    let mut out = vec![0.0; numel(s)];
                    for o in 0..outer {
                        for d in 0..dim {
                            for i in 0..inner {
                                out[(o * dim + d) * inner + i] = gd[o * inner + i];
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(s.to_vec(), out)?);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(g.shape(), *axis);
                    let gd = g.data();
                    let mut offset = 0;
                    for id in inputs {
                        let s = self.shape(*id);
                        let dim = s[*axis];
                        if need(id) {
                            let mut out = Vec::with_capacity(numel(s));
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                out.extend_from_slice(&gd[base..base + dim * inner]);
                            }
                            acc(&mut grads, *id, Tensor::new(s.to_vec(), out)?);
                        }
                        offset += dim;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let s = self.shape(*a);
                    let (outer, dim, inner) = split_axis(s, *axis);
                    let len = g.shape()[*axis];
                    let gd = g.data();
                    let mut out = vec![0.0; numel(s)];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * dim + start) * inner;
                        out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                    }
                    acc(&mut grads, *a, Tensor::new(s.to_vec(), out)?);
                }
                Op::Reshape { a } => acc(&mut grads, *a, g.with_shape(self.shape(*a).to_vec())),
                Op::CumProd { a } => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let gd = g.data();
                    let n = x.len();
                    let mut out = vec![0.0; n];
                    let mut r = 0.0;
                    for j in (0..n).rev() {
                        r = if j + 1 < n { gd[j + 1] + x[j + 1] * r } else { gd[n] };
                        out[j] = y[j] * r;
                    }
                    acc(&mut grads, *a, Tensor::new(self.shape(*a).to_vec(), out)?);
                }
                Op::SolveSpd { a, b, chol } => {
                    let x = node.value.data();
                    let (n, m) = (node.value.rows(), node.value.cols());
                    let mut gb = g.data().to_vec();
                    linalg::cholesky_solve(n, chol, &mut gb, m);
                    if need(a) {
                        // dA = -sym(gB X^T)
                        let mut ga = vec![0.0; n * n];
                        linalg::gemm(n, m, n, &gb, false, x, true, 0.0, &mut ga);
                        let mut sym = vec![0.0; n * n];
                        for i in 0..n {
                            for j in 0..n {
                                sym[i * n + j] = -0.5 * (ga[i * n + j] + ga[j * n + i]);
                            }
                        }
                        acc(&mut grads, *a, Tensor::new(vec![n, n], sym)?);
                    }
                    if need(b) {
                        acc(&mut grads, *b, Tensor::new(vec![n, m], gb)?);
                    }
                }
            }
        }

        let entries = self
            .params
            .iter()
            .map(|&p| {
                let g = grads.get_mut(p.0).and_then(Option::take);
                (p, g.unwrap_or_else(|| Tensor::zeros(self.shape(p))))
            })
            .collect();
        Ok(Gradients { entries })
    }
}
