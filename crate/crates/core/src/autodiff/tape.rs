//! Dynamic reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use std::fmt;
use std::str::FromStr;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Relu,
    Square,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Concat,
    Narrow,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::LogSigmoid,
        OpKind::Relu,
        OpKind::Square,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Relu,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, b_t: bool },
    Binary { kind: Binary, a: usize, b: usize },
    Unary { kind: Unary, a: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
                Binary::Div => OpKind::Div,
            },
            Op::Unary { kind, .. } => match kind {
                Unary::Neg => OpKind::Neg,
                Unary::Exp => OpKind::Exp,
                Unary::Log => OpKind::Log,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Softplus => OpKind::Softplus,
                Unary::LogSigmoid => OpKind::LogSigmoid,
                Unary::Relu => OpKind::Relu,
                Unary::Square => OpKind::Square,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// How an operand maps onto a broadcast output.
#[derive(Clone, Debug)]
enum IndexMap {
    Same,
    Scalar,
    /// Operand equals the trailing block of the output; index is `i % len`.
    Tile(usize),
    General(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Scalar => 0,
            IndexMap::Tile(n) => i % n,
            IndexMap::General(idx) => idx[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dim(
                op,
                format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
            ));
        };
    }
    Ok(out)
}

fn index_map(operand: &[usize], out: &[usize]) -> IndexMap {
    let n: usize = operand.iter().product();
    let total: usize = out.iter().product();
    if operand == out {
        return IndexMap::Same;
    }
    if n == 1 {
        return IndexMap::Scalar;
    }
    let trimmed: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return if n == total {
            IndexMap::Same
        } else {
            IndexMap::Tile(n)
        };
    }
    let rank = out.len();
    let offset = rank - operand.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..operand.len()).rev() {
        if operand[i] != 1 {
            strides[i + offset] = s;
        }
        s *= operand[i];
    }
    let mut idx = Vec::with_capacity(total);
    let mut coord = vec![0usize; rank];
    for _ in 0..total {
        idx.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    IndexMap::General(idx)
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
    fault: Option<OpKind>,
    last_visits: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape with strict finite-value and domain checking enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            strict: true,
            fault: None,
            last_visits: 0,
        }
    }

    /// A tape without per-op finiteness checks.
    pub fn unchecked() -> Self {
        Tape {
            strict: false,
            ..Self::new()
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// Corrupts the backward rule of one op kind (gradient scaled by 1.5).
    /// Exists so gradient checks can prove they detect a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes processed by the most recent [`Tape::backward`].
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        let kind = op.kind();
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite {
                op: kind.name().to_string(),
            });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- matrix products ------------------------------------------------

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected rank-2 operands, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}{}", if b_t { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            b_t,
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a: a.0, b: b.0, b_t }, &[a.0, b.0])
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let ma = index_map(&sa, &out_shape);
        let mb = index_map(&sb, &out_shape);
        let xa = self.nodes[a.0].value.data();
        let xb = self.nodes[b.0].value.data();
        let total: usize = out_shape.iter().product();
        if self.strict {
            if let Binary::Div = kind {
                if xb.iter().any(|&v| v == 0.0) {
                    return Err(Error::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
            }
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let out: Vec<f64> = match (&ma, &mb) {
            (IndexMap::Same, IndexMap::Same) => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..total).map(|i| f(xa[ma.at(i)], xb[mb.at(i)])).collect(),
        };
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Binary { kind, a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.nodes[a.0].value.data();
        if self.strict {
            if let Unary::Log = kind {
                if let Some(v) = x.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("argument {v} is not positive"),
                    });
                }
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::LogSigmoid => |v| -softplus(-v),
            Unary::Relu => |v| v.max(0.0),
            Unary::Square => |v| v * v,
        };
        let out = x.iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(value, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    /// `log(sigmoid(a))`, evaluated without forming the sigmoid.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(value, Op::AddScalar { a: a.0 }, &[a.0])
    }

    // ----- reductions -----------------------------------------------------

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(a)),
            ));
        }
        Ok(())
    }

    fn reduce_value(&self, a: Var, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let t = &self.nodes[a.0].value;
        match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let n = t.numel();
                Ok(Tensor::scalar(if mean { s / n as f64 } else { s }))
            }
            Some(axis) => {
                let (outer, n, inner) = blocks(t.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let x = t.data();
                for o in 0..outer {
                    for j in 0..n {
                        let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)
            }
        }
    }

    /// Sum over all elements (`axis = None`) or along one axis, which is removed.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("sum", a, ax)?;
        }
        let value = self.reduce_value(a, axis, false)?;
        self.push(value, Op::Sum { a: a.0, axis }, &[a.0])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("mean", a, ax)?;
        }
        if self.nodes[a.0].value.numel() == 0 && axis.is_none() {
            return Err(Error::dim("mean", "mean of an empty tensor"));
        }
        let value = self.reduce_value(a, axis, true)?;
        self.push(value, Op::Mean { a: a.0, axis }, &[a.0])
    }

    // ----- structure ------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = blocks(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!(
                    "range {}..{} exceeds extent {} of {:?}",
                    start,
                    start + len,
                    shape[axis],
                    shape
                ),
            ));
        }
        let (outer, n, inner) = blocks(&shape, axis);
        let x = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Narrow { a: a.0, axis, start }, &[a.0])
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        self.check_axis("split", a, axis)?;
        if total != self.shape(a)[axis] {
            return Err(Error::dim(
                "split",
                format!("sizes {sizes:?} do not cover extent {}", self.shape(a)[axis]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push(value, Op::Reshape { a: a.0 }, &[a.0])
    }

    // ----- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// Repeated calls without [`Tape::zero_grad`] add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.last_visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            self.last_visits += 1;
            let kind = self.nodes[i].op.kind();
            if kind == OpKind::Leaf {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            if self.fault == Some(kind) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].requires_grad;
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> &'g mut Vec<f64> {
            let n = nodes[p].value.numel();
            grads[p].get_or_insert_with(|| vec![0.0; n])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (a, b, b_t) = (*a, *b, *b_t);
                let av = &nodes[a].value;
                let bv = &nodes[b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !b_t, ga, 1.0);
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    if b_t {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                    } else {
                        // B is [k, n]: dB = Aᵀ · dC
                        gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let xa = nodes[a].value.data();
                let xb = nodes[b].value.data();
                let ma = index_map(nodes[a].value.shape(), out.shape());
                let mb = index_map(nodes[b].value.shape(), out.shape());
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    for (idx, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * xb[mb.at(idx)],
                            Binary::Div => gi / xb[mb.at(idx)],
                        };
                        ga[ma.at(idx)] += d;
                    }
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    for (idx, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * xa[ma.at(idx)],
                            Binary::Div => {
                                let y = xb[mb.at(idx)];
                                -gi * xa[ma.at(idx)] / (y * y)
                            }
                        };
                        gb[mb.at(idx)] += d;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let x = nodes[a].value.data();
                let y = out.data();
                let ga = slot(grads, nodes, a);
                for idx in 0..g.len() {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => y[idx],
                        Unary::Log => 1.0 / x[idx],
                        Unary::Sigmoid => y[idx] * (1.0 - y[idx]),
                        Unary::Softplus => sigmoid(x[idx]),
                        Unary::LogSigmoid => sigmoid(-x[idx]),
                        Unary::Relu => {
                            if x[idx] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[idx],
                    };
                    ga[idx] += g[idx] * d;
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let is_mean = matches!(nodes[i].op, Op::Mean { .. });
                let shape = nodes[a].value.shape();
                let ga = slot(grads, nodes, a);
                match axis {
                    None => {
                        let n = ga.len();
                        let v = if is_mean { g[0] / n as f64 } else { g[0] };
                        ga.iter_mut().for_each(|d| *d += v);
                    }
                    Some(axis) => {
                        let (outer, n, inner) = blocks(shape, *axis);
                        let w = if is_mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for j in 0..n {
                                let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s * w;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = blocks(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis] * inner;
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            let dst = &mut gp[o * len..(o + 1) * len];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let (outer, n, inner) = blocks(nodes[a].value.shape(), *axis);
                let len = out.shape()[*axis];
                let ga = slot(grads, nodes, a);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    ga[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}
