//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly,
//! stores its value, and records the inputs its adjoint needs. Because a
//! node can only reference nodes created before it, the tape is always in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Handles ([`Var`]) are plain indices, so a graph and all of its values form
//! one owned unit that can be moved across threads.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor used for norm denominators and inside the KL divergence.
pub const EPS: f64 = 1e-8;

/// Norms below this are treated as zero vectors.
const DEGENERATE_NORM: f64 = 1e-12;

/// Row-sum tolerance for probability-simplex inputs.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and adjoint fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Permute,
    Reshape,
    Add,
    Sub,
    Mul,
    AddRow,
    Affine,
    MulScalar,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Clamp,
    Softmax,
    SumAxis,
    SumAll,
    ConcatLast,
    SliceLast,
    BroadcastLeading,
    NormalizeLast,
    NormLast,
    KlLast,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Affine,
        OpKind::MulScalar,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Abs,
        OpKind::Clamp,
        OpKind::Softmax,
        OpKind::SumAxis,
        OpKind::SumAll,
        OpKind::ConcatLast,
        OpKind::SliceLast,
        OpKind::BroadcastLeading,
        OpKind::NormalizeLast,
        OpKind::NormLast,
        OpKind::KlLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Affine => "affine",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Abs => "abs",
            OpKind::Clamp => "clamp",
            OpKind::Softmax => "softmax",
            OpKind::SumAxis => "sum_axis",
            OpKind::SumAll => "sum_all",
            OpKind::ConcatLast => "concat_last",
            OpKind::SliceLast => "slice_last",
            OpKind::BroadcastLeading => "broadcast_leading",
            OpKind::NormalizeLast => "normalize_last",
            OpKind::NormLast => "norm_last",
            OpKind::KlLast => "kl_last",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    ConcatLast(Var, Var),
    SliceLast(Var, usize),
    BroadcastLeading(Var),
    NormalizeLast(Var),
    NormLast(Var),
    KlLast(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Affine(..) => OpKind::Affine,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Ln(..) => OpKind::Ln,
            Op::Abs(..) => OpKind::Abs,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::SumAll(..) => OpKind::SumAll,
            Op::ConcatLast(..) => OpKind::ConcatLast,
            Op::SliceLast(..) => OpKind::SliceLast,
            Op::BroadcastLeading(..) => OpKind::BroadcastLeading,
            Op::NormalizeLast(..) => OpKind::NormalizeLast,
            Op::NormLast(..) => OpKind::NormLast,
            Op::KlLast(..) => OpKind::KlLast,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes that do not require
    /// gradients, or that the loss does not depend on, yield zeros.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// True when the sweep reached `v` with some gradient signal.
    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn take_data(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose adjoint for `kind` is deliberately wrong (scaled by 1.5).
    /// Only meant for negative controls of the gradient checker.
    #[doc(hidden)]
    pub fn with_adjoint_fault(kind: OpKind) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(kind),
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant leaf; never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` into a constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over matching leading dimensions:
    /// `[.., m, k] x [.., k, n] -> [.., m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            mm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim("permute", &shape, axes));
        }
        for &a in axes {
            if seen[a] {
                return Err(Error::dim("permute", &shape, axes));
            }
            seen[a] = true;
        }
        let (out_shape, out) = permute_forward(self.value(x).data(), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.kind().name();
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[.., n] + b[n]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != n || sx.is_empty() {
            return Err(Error::dim("add_row", sx, sb));
        }
        let bias = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let t = Tensor::new(sx.to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Affine(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, 1.0, c)
    }

    /// `s * x` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.scalar(s);
        let out: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, op, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric {
                op: "ln".into(),
                detail: format!("argument {bad} is not a positive finite number"),
            });
        }
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    // ---- reductions and normalizations ----------------------------------

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax".into(),
                detail: format!("input contains {bad}"),
            });
        }
        let n = *shape.last().unwrap_or(&1);
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", &sa, &sb));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks(na).zip(db.chunks(nb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(a, b), rg))
    }

    /// `x[.., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        if shape.is_empty() || len == 0 || start + len > n {
            return Err(Error::dim("slice_last", &shape, &[start, len]));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SliceLast(x, start), rg))
    }

    /// Repeats `x` `count` times along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::dim("broadcast_leading", self.shape(x), &[count]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * count);
        for _ in 0..count {
            out.extend_from_slice(src);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BroadcastLeading(x), rg))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    ///
    /// A (numerically) zero vector is a degenerate-input error, never a
    /// silent zero. Denominators are floored at [`EPS`].
    pub fn normalize_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(data.len());
        for (r, row) in data.chunks(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric {
                    op: "normalize".into(),
                    detail: format!("row {r} has norm {norm}"),
                });
            }
            if norm < DEGENERATE_NORM {
                return Err(Error::Degenerate {
                    op: "normalize",
                    detail: format!("row {r} has zero norm"),
                });
            }
            let d = norm.max(EPS);
            out.extend(row.iter().map(|v| v / d));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeLast(x), rg))
    }

    /// L2 norm along the last axis, removing it.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::NormLast(x), rg))
    }

    /// `KL(p || q)` along the last axis, removing it. Both operands must be
    /// probability vectors within [`SIMPLEX_TOL`]; `q` is floored at [`EPS`]
    /// and `0 ln 0` is taken as zero.
    pub fn kl_last(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let shape = self.shape(p).to_vec();
        let n = *shape.last().unwrap_or(&1);
        for (name, v) in [("p", p), ("q", q)] {
            check_simplex(self.value(v).data(), n).map_err(|detail| Error::Domain {
                op: "kl_divergence",
                detail: format!("{name}: {detail}"),
            })?;
        }
        let out: Vec<f64> = self
            .value(p)
            .data()
            .chunks(n)
            .zip(self.value(q).data().chunks(n))
            .map(|(pr, qr)| {
                pr.iter()
                    .zip(qr)
                    .filter(|(&pi, _)| pi > 0.0)
                    .map(|(&pi, &qi)| pi * (pi / qi.max(EPS)).ln())
                    .sum()
            })
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::KlLast(p, q), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let acc = slot(grads, *a, m * k);
                    mm_nt_acc(g, self.value(*b).data(), acc, m, n, k);
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, k * n);
                    mm_tn_acc(self.value(*a).data(), g, acc, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                if self.wants(*a) {
                    let db = self.value(*b).data();
                    let acc = slot(grads, *a, batch * m * k);
                    for i in 0..batch {
                        mm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            &mut acc[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.wants(*b) {
                    let da = self.value(*a).data();
                    let acc = slot(grads, *b, batch * k * n);
                    for i in 0..batch {
                        mm_tn_acc(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut acc[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute(x, axes) => {
                if self.wants(*x) {
                    let in_shape = self.shape(*x).to_vec();
                    let acc = slot(grads, *x, y.len());
                    permute_backward(g, &in_shape, axes, acc);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g, self.wants(*x)),
            Op::Add(a, b) => {
                accumulate(grads, *a, g, self.wants(*a));
                accumulate(grads, *b, g, self.wants(*b));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, self.wants(*a));
                if self.wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    acc.iter_mut().zip(g).for_each(|(s, v)| *s -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let acc = slot(grads, *a, g.len());
                    for ((s, gv), bv) in acc.iter_mut().zip(g).zip(bv) {
                        *s += gv * bv;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let acc = slot(grads, *b, g.len());
                    for ((s, gv), av) in acc.iter_mut().zip(g).zip(av) {
                        *s += gv * av;
                    }
                }
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, g, self.wants(*x));
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let acc = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Affine(x, scale) => {
                if self.wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(s, v)| *s += scale * v);
                }
            }
            Op::MulScalar(x, s) => {
                let c = self.scalar(*s);
                if self.wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += c * v);
                }
                if self.wants(*s) {
                    let dot: f64 = g.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::Tanh(x) => self.elementwise_back(grads, *x, g, |_, yv| 1.0 - yv * yv, y),
            Op::Relu(x) => {
                self.elementwise_back(grads, *x, g, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }, y)
            }
            Op::Sigmoid(x) => self.elementwise_back(grads, *x, g, |_, yv| yv * (1.0 - yv), y),
            Op::Exp(x) => self.elementwise_back(grads, *x, g, |_, yv| yv, y),
            Op::Ln(x) => self.elementwise_back(grads, *x, g, |xv, _| 1.0 / xv, y),
            Op::Abs(x) => self.elementwise_back(grads, *x, g, |xv, _| xv.signum(), y),
            Op::Clamp(x, lo, hi) => self.elementwise_back(
                grads,
                *x,
                g,
                |xv, _| if xv >= *lo && xv <= *hi { 1.0 } else { 0.0 },
                y,
            ),
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let acc = slot(grads, *x, g.len());
                    for ((yr, gr), ar) in y.chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((a, yv), gv) in ar.iter_mut().zip(yr).zip(gr) {
                            *a += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (outer, len, inner) = split_axis(&shape, *axis);
                    let acc = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut acc[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let acc = slot(grads, *x, n);
                    acc.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::ConcatLast(a, b) => {
                let na = *self.shape(*a).last().unwrap();
                let nb = *self.shape(*b).last().unwrap();
                if self.wants(*a) {
                    let acc = slot(grads, *a, y.len() / (na + nb) * na);
                    for (gr, ar) in g.chunks(na + nb).zip(acc.chunks_mut(na)) {
                        ar.iter_mut().zip(&gr[..na]).for_each(|(s, v)| *s += v);
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, y.len() / (na + nb) * nb);
                    for (gr, br) in g.chunks(na + nb).zip(acc.chunks_mut(nb)) {
                        br.iter_mut().zip(&gr[na..]).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::SliceLast(x, start) => {
                if self.wants(*x) {
                    let n = *self.shape(*x).last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let total = self.value(*x).numel();
                    let acc = slot(grads, *x, total);
                    for (gr, ar) in g.chunks(len).zip(acc.chunks_mut(n)) {
                        ar[*start..*start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::BroadcastLeading(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let acc = slot(grads, *x, n);
                    for chunk in g.chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::NormalizeLast(x) => {
                if self.wants(*x) {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let xv = self.value(*x).data();
                    let acc = slot(grads, *x, g.len());
                    for (((yr, gr), xr), ar) in y
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(xv.chunks(n))
                        .zip(acc.chunks_mut(n))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let d = norm.max(EPS);
                        if norm >= EPS {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((a, yv), gv) in ar.iter_mut().zip(yr).zip(gr) {
                                *a += (gv - yv * dot) / d;
                            }
                        } else {
                            for (a, gv) in ar.iter_mut().zip(gr) {
                                *a += gv / d;
                            }
                        }
                    }
                }
            }
            Op::NormLast(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let n = *self.shape(*x).last().unwrap_or(&1);
                    let acc = slot(grads, *x, xv.len());
                    for (((xr, ar), gv), norm) in
                        xv.chunks(n).zip(acc.chunks_mut(n)).zip(g).zip(y)
                    {
                        let d = norm.max(EPS);
                        for (a, v) in ar.iter_mut().zip(xr) {
                            *a += gv * v / d;
                        }
                    }
                }
            }
            Op::KlLast(p, q) => {
                let n = *self.shape(*p).last().unwrap_or(&1);
                let pv = self.value(*p).data();
                let qv = self.value(*q).data();
                if self.wants(*p) {
                    let acc = slot(grads, *p, pv.len());
                    for (((pr, qr), ar), gv) in
                        pv.chunks(n).zip(qv.chunks(n)).zip(acc.chunks_mut(n)).zip(g)
                    {
                        for ((a, &pi), &qi) in ar.iter_mut().zip(pr).zip(qr) {
                            *a += gv * ((pi.max(EPS) / qi.max(EPS)).ln() + 1.0);
                        }
                    }
                }
                if self.wants(*q) {
                    let acc = slot(grads, *q, qv.len());
                    for (((pr, qr), ar), gv) in
                        pv.chunks(n).zip(qv.chunks(n)).zip(acc.chunks_mut(n)).zip(g)
                    {
                        for ((a, &pi), &qi) in ar.iter_mut().zip(pr).zip(qr) {
                            if qi >= EPS {
                                *a -= gv * pi / qi;
                            }
                        }
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        d: impl Fn(f64, f64) -> f64,
        y: &[f64],
    ) {
        if !self.wants(x) {
            return;
        }
        let xv = self.value(x).data();
        let acc = slot(grads, x, g.len());
        for (((a, gv), xi), yi) in acc.iter_mut().zip(g).zip(xv).zip(y) {
            *a += gv * d(*xi, *yi);
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_simplex(data: &[f64], n: usize) -> std::result::Result<(), String> {
    for (r, row) in data.chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(format!("row {r} sums to {sum}"));
        }
        if let Some(v) = row.iter().find(|&&v| v < -SIMPLEX_TOL || !v.is_finite()) {
            return Err(format!("row {r} has entry {v}"));
        }
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], wants: bool) {
    if !wants {
        return;
    }
    let acc = slot(grads, v, g.len());
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits output positions of a permutation in order, yielding the matching
/// flat input index.
fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_forward(data: &[f64], in_shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    for_each_permuted(in_shape, axes, |o, s| out[o] = data[s]);
    (out_shape, out)
}

fn permute_backward(g: &[f64], in_shape: &[usize], axes: &[usize], acc: &mut [f64]) {
    for_each_permuted(in_shape, axes, |o, s| acc[s] += g[o]);
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    gemm_acc(g, (n, 1), b, (1, n), out, m, n, k);
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (1, k), g, (n, 1), out, k, m, n);
}

/// `out[m x n] += a[m x k] * b[k x n]` with arbitrary (row, col) strides on the inputs.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the bounds above cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 1], &[0.3, -1.7]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.7]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let o = g.constant(Tensor::ones(&[3, 2]));
        let p = g.matmul(z, o).unwrap();
        assert_eq!(g.value(p).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let zero = g.scale(x, 0.0).unwrap();
        let s = g.sum(zero).unwrap();
        let loss = g.add(s, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] == x[i, j, k]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, f64::NAN]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.normalize_last(x), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn kl_rejects_off_simplex() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![0.5, 0.6]));
        let q = g.constant(Tensor::from_vec(vec![0.5, 0.5]));
        assert!(matches!(g.kl_last(p, q), Err(Error::Domain { .. })));
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2, 1], vec![1., 1., 2., 0.]).unwrap());
        let c = g.bmm(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 6.0]);
    }
}
