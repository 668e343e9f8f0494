//! Dense `f64` tensors and a per-forward-pass reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the records once, newest first, and
//! returns a [`Gradients`] table. Parameters live in a [`ParamStore`] that the
//! graph borrows read-only, so several graphs can share one store.
//!
//! Binary elementwise ops accept equal shapes, or a single-element operand on
//! either side. There is no other broadcasting; row-wise bias addition and
//! pairwise sums are separate named ops.

mod gradcheck;
mod kernels;
mod params;

pub use gradcheck::{grad_check, grad_check_params, ParamCheck};
pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use kernels::{matmul_abt_acc, matmul_acc, matmul_atb_acc};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("ragged rows"));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds exposed through [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

type DerivFn = Box<dyn Fn(f64) -> f64>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Map(Var, DerivFn),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmaxRows(Var),
    AddRow(Var, Var),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<Option<usize>>),
    PairwiseSum(Var, Var),
    Reshape(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    Crf { em: Var, trans: Var, start: Var, end: Var, saved: Box<crate::crf::CrfGrads> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Map(..) => "map",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmaxRows(..) => "masked_softmax",
            Op::AddRow(..) => "add_row",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::PairwiseSum(..) => "pairwise_sum",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SegmentMax { .. } => "segment_max",
            Op::Crf { .. } => "crf_nll",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::PairwiseSum(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Map(a, _)
            | Op::MaskedSoftmaxRows(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SliceCols(a, ..)
            | Op::GatherRows(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Softmax { x, .. } | Op::SegmentMax { x, .. } => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Crf { em, trans, start, end, .. } => vec![*em, *trans, *start, *end],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    requires_grad: bool,
    op: Op,
}

/// Dynamic tape for one forward/backward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    nan_guard: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters. The finiteness guard is on in debug builds.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            nan_guard: cfg!(debug_assertions),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Self::new()
        }
    }

    /// Enables or disables the per-op finiteness assertion.
    pub fn set_nan_guard(&mut self, on: bool) {
        self.nan_guard = on;
    }

    pub fn nan_guard(&self) -> bool {
        self.nan_guard
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.expect("param node without store").get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (s[0], s[1..].iter().product())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.nan_guard && data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            value: Value::Owned(t.data),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A detached leaf; its gradient is always zero.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::matrix(rows, cols, data)?))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph was built without a parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            requires_grad: true,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// The node a parameter was loaded into, if it was used on this graph.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.0).copied().flatten()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (self.value(a), self.value(b));
        match (x.len(), y.len()) {
            (n, m) if n == m => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            (_, 1) => x.iter().map(|&p| f(p, y[0])).collect(),
            _ => y.iter().map(|&q| f(x[0], q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(shape, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(shape, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    /// `1 - a`, used for complementary gates.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let one = self.constant(Tensor::scalar(1.0));
        self.sub(one, a)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("ln of a non-positive value"));
        }
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Pointwise map with a caller-supplied derivative `df(x)`.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.unary(a, f, Op::Map(a, Box::new(df)))
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::contract(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
        }
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| v[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (v[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, outer, len, inner })
    }

    /// Row-wise softmax of a 2-D tensor where `key_mask[j] == false` columns
    /// are excluded: they get exactly zero weight and do not enter the
    /// normaliser. At least one column must be kept.
    pub fn masked_softmax_rows(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if key_mask.len() != c {
            return Err(Error::shape("masked_softmax_rows", self.shape(x), &[key_mask.len()]));
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::contract("attention with every key masked"));
        }
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(key_mask)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if key_mask[j] {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::MaskedSoftmaxRows(x))
    }

    /// Adds a `1×d` (or length-`d`) row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let b = self.value(row);
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            for (o, bj) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bj;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row))
    }

    /// `x·W + b` for an `n×k` input, `k×m` weight and length-`m` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let v = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, xv) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                *o += xv;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(vec![1, c], out, Op::MeanRows(x))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let r = self.dims2(first).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xr, xc) = self.dims2(x);
            if xr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(xc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let v = self.value(x);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(vec![r, total], out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let c = self.dims2(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (xr, xc) = self.dims2(x);
            if xc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += xr;
            out.extend_from_slice(self.value(x));
        }
        self.push(vec![rows, c], out, Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        self.push(vec![r, w], out, Op::SliceCols(x, start, end))
    }

    /// Row gather; `None` yields a zero row. Doubles as embedding lookup.
    pub fn gather_rows_opt(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if idx.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::contract(format!("row index {bad} out of range for {r} rows")));
        }
        let v = self.value(x);
        let mut out = vec![0.0; idx.len() * c];
        for (k, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out[k * c..(k + 1) * c].copy_from_slice(&v[i * c..(i + 1) * c]);
            }
        }
        self.push(vec![idx.len(), c], out, Op::GatherRows(x, idx.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = idx.iter().copied().map(Some).collect();
        self.gather_rows_opt(x, &idx)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// For `a: n×k`, `b: m×k` returns `(n·m)×k` with row `i·m + j = a_i + b_j`.
    pub fn pairwise_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a);
        let (m, kb) = self.dims2(b);
        if k != kb {
            return Err(Error::shape("pairwise_sum", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m * k];
        for i in 0..n {
            for j in 0..m {
                let o = &mut out[(i * m + j) * k..(i * m + j + 1) * k];
                for p in 0..k {
                    o[p] = x[i * k + p] + y[j * k + p];
                }
            }
        }
        self.push(vec![n * m, k], out, Op::PairwiseSum(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let v = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Column-wise max over each contiguous row segment `[start, end)`.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if segments.iter().any(|&(s, e)| s >= e || e > r) {
            return Err(Error::contract("segment_max with empty or out-of-range segment"));
        }
        let v = self.value(x);
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = vec![0; segments.len() * c];
        for (k, &(s, e)) in segments.iter().enumerate() {
            for j in 0..c {
                let mut best = s;
                for i in s + 1..e {
                    if v[i * c + j] > v[best * c + j] {
                        best = i;
                    }
                }
                out[k * c + j] = v[best * c + j];
                argmax[k * c + j] = best;
            }
        }
        self.push(vec![segments.len(), c], out, Op::SegmentMax { x, argmax })
    }

    /// Negative log-likelihood of `gold` under a linear-chain CRF.
    pub fn crf_nll(
        &mut self,
        emissions: Var,
        transitions: Var,
        start: Var,
        end: Var,
        gold: &[usize],
    ) -> Result<Var> {
        let (n, l) = self.dims2(emissions);
        if self.dims2(transitions) != (l, l)
            || self.value(start).len() != l
            || self.value(end).len() != l
        {
            return Err(Error::shape("crf_nll", self.shape(emissions), self.shape(transitions)));
        }
        let view = crate::crf::CrfView {
            emissions: self.value(emissions),
            n,
            labels: l,
            transitions: self.value(transitions),
            start: self.value(start),
            end: self.value(end),
        };
        let (loss, grads) = view.nll_with_grads(gold)?;
        self.push(
            vec![1],
            vec![loss],
            Op::Crf {
                em: emissions,
                trans: transitions,
                start,
                end,
                saved: Box::new(grads),
            },
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| matmul_abt_acc(g, bv, m, n, k, ga));
                acc(*b, &mut |gb| matmul_atb_acc(av, g, m, k, n, gb));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| reduce_into(ga, g, 1.0));
                acc(*b, &mut |gb| reduce_into(gb, g, sign));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| mul_grad(ga, g, y));
                acc(*b, &mut |gb| mul_grad(gb, g, x));
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += gi * y;
                }
            }),
            Op::Ln(a) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi / xi;
                    }
                })
            }
            Op::Map(a, df) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * df(*xi);
                    }
                })
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..len {
                                gx[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::MaskedSoftmaxRows(x) => {
                let (r, c) = self.dims2(*x);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let (gr, yr) = (&g[i * c..(i + 1) * c], &out[i * c..(i + 1) * c]);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::AddRow(x, row) => {
                let (r, c) = self.dims2(*x);
                acc(*x, &mut |gx| reduce_into(gx, g, 1.0));
                acc(*row, &mut |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanRows(x) => {
                let (r, c) = self.dims2(*x);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / r as f64;
                        }
                    }
                })
            }
            Op::ConcatCols(xs) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &x in xs {
                    let w = self.dims2(x).1;
                    acc(x, &mut |gx| {
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, &mut |gx| reduce_into(gx, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (r, c) = self.dims2(*x);
                let w = end - start;
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                })
            }
            Op::GatherRows(x, idx) => {
                let c = self.dims2(*x).1;
                acc(*x, &mut |gx| {
                    for (k, i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            for j in 0..c {
                                gx[i * c + j] += g[k * c + j];
                            }
                        }
                    }
                })
            }
            Op::PairwiseSum(a, b) => {
                let (n, k) = self.dims2(*a);
                let m = self.dims2(*b).0;
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            for p in 0..k {
                                ga[i * k + p] += g[(i * m + j) * k + p];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            for p in 0..k {
                                gb[j * k + p] += g[(i * m + j) * k + p];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| reduce_into(gx, g, 1.0)),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = self.dims2(*x);
                let gam = self.value(*gamma);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            gx[i * c + j] += rstd[i] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let c = self.dims2(*x).1;
                acc(*x, &mut |gx| {
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src * c + k % c] += g[k];
                    }
                })
            }
            Op::Crf { em, trans, start, end, saved } => {
                let s = g[0];
                acc(*em, &mut |ge| axpy(ge, &saved.emissions, s));
                acc(*trans, &mut |gt| axpy(gt, &saved.transitions, s));
                acc(*start, &mut |gs| axpy(gs, &saved.start, s));
                acc(*end, &mut |gn| axpy(gn, &saved.end, s));
            }
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is detached or unreachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, graph: &Graph<'_>, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Gradient of every parameter reached by the pass, detached from the
    /// graph so the store can be borrowed mutably afterwards.
    pub fn param_grads(&self, graph: &Graph<'_>) -> Vec<(ParamId, Vec<f64>)> {
        graph
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(slot, var)| {
                let g = self.get((*var)?)?;
                Some((ParamId(slot), g.to_vec()))
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduce_into(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        for (d, gi) in dst.iter_mut().zip(g) {
            *d += sign * gi;
        }
    } else {
        // scalar operand broadcast over g
        dst[0] += sign * g.iter().sum::<f64>();
    }
}

fn mul_grad(dst: &mut [f64], g: &[f64], other: &[f64]) {
    match (dst.len(), other.len()) {
        (d, o) if d == g.len() && o == g.len() => {
            for ((x, gi), oi) in dst.iter_mut().zip(g).zip(other) {
                *x += gi * oi;
            }
        }
        (d, 1) if d == g.len() => {
            for (x, gi) in dst.iter_mut().zip(g) {
                *x += gi * other[0];
            }
        }
        _ => dst[0] += g.iter().zip(other).map(|(a, b)| a * b).sum::<f64>(),
    }
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}
