//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node to the tape; node indices are therefore
//! a topological order, and [`Graph::backward`] walks them once in reverse.
//! Gradients reaching leaf nodes are accumulated: calling `backward` twice
//! without [`Graph::zero_grad`] sums the two contributions.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::Tensor;

/// `sqrt(2/pi)` used by the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Exp,
    Log,
    Tanh,
    Sin,
    Cos,
    Sigmoid,
    LogSigmoid,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sigmoid => "sigmoid",
            Unary::LogSigmoid => "log_sigmoid",
            Unary::Abs => "abs",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Abs => x.abs(),
        }
    }

    /// d/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(x, y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LogSigmoid => 1.0 - sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    // 0.5 (1 + tanh z) == sigmoid(2z), which needs one exp instead of tanh.
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x * sigmoid(2.0 * inner)
}

fn gelu_grad(x: f64, y: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    // y = x·s, so the forward sigmoid is recovered without another exp.
    let s = if x.abs() > 1e-100 { y / x } else { sigmoid(2.0 * inner) };
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    s + 2.0 * x * s * (1.0 - s) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Broadcasting rules for binary ops: equal shapes, a one-element right
/// operand, or a right operand with as many entries as the left operand's
/// last dimension (row broadcast over a 2-D left operand).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (or `None` to skip it).
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    Offset(Var),
    Unary(Unary, Var),
    Matmul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Transpose(Var),
    Sum(Var),
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        cols: Vec<f64>,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
    },
    RowCosine {
        a: Var,
        b: Var,
        stats: Vec<CosStats>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp>,
    },
}

#[derive(Clone, Copy)]
struct CosStats {
    norm_a: f64,
    norm_b: f64,
    denom: f64,
    clamped: bool,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(u, _) => u.name(),
            Op::Matmul { tb: false, .. } => "matmul",
            Op::Matmul { tb: true, .. } => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Conv1d { .. } => "conv1d",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::RowCosine { .. } => "row_cosine",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Softmax(a) => vec![*a],
            Op::LogSoftmax { x, .. } | Op::LayerNorm { x, .. } | Op::SliceCols { x, .. } => {
                vec![*x]
            }
            Op::Matmul { a, b, .. } | Op::RowCosine { a, b, .. } => vec![*a, *b],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Conv1d { x, w, .. } | Op::DepthwiseConv1d { x, w } => vec![*x, *w],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Parameter leaves borrow their data from a [`ParamStore`] for the lifetime
/// `'p`; everything else is owned by the tape.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
    check_finite: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Finiteness checks after every op are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_vars: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        if self.check_finite && !matches!(op, Op::Custom { .. }) {
            if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
                log::debug!("non-finite entry {pos} from {}", op.name());
                return Err(Error::NonFinite { op: op.name() });
            }
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not track gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(shape, Cow::Owned(t.into_data()), false)
    }

    /// A gradient-tracked leaf owning its data.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(shape, Cow::Owned(t.into_data()), true)
    }

    pub fn scalar_input(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    /// Gradient-tracked leaf borrowing a stored parameter. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = store.get(id);
        let v = self.leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// The node bound to a parameter, if this graph used it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.index()).copied().flatten()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- elementwise -------------------------------------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let nb = self.nodes[b.0].value.len();
        if sa == sb {
            Ok(Broadcast::Same)
        } else if nb == 1 {
            Ok(Broadcast::Scalar)
        } else if sa.len() == 2 && nb == sa[1] && (sb.len() == 1 || sb[0] == 1) {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = self.broadcast(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let out = match kind {
            Binary::Add => broadcast_map(va, vb, bc, |x, y| x + y),
            Binary::Sub => broadcast_map(va, vb, bc, |x, y| x - y),
            Binary::Mul => broadcast_map(va, vb, bc, |x, y| x * y),
        };
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, Cow::Owned(out), Op::Binary(kind, a, b, bc))
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

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, Cow::Owned(out), Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, Cow::Owned(out), Op::Offset(a))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if kind == Unary::Log {
            if let Some(bad) = va.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("input {bad} is not positive"),
                });
            }
        }
        let out = va.iter().map(|&x| kind.apply(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, Cow::Owned(out), Op::Unary(kind, a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Cos, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }

    // ---- linear algebra ----------------------------------------------

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.nodes[v.0].shape, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        let out = kernels::gemm_new(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false);
        self.push(vec![m, n], Cow::Owned(out), Op::Matmul { a, b, tb: false })
    }

    /// `a · bᵀ` for `a: [M×K]`, `b: [P×K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        let out = kernels::gemm_new(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, true);
        self.push(vec![m, n], Cow::Owned(out), Op::Matmul { a, b, tb: true })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.nodes[a.0].value, r, c, &mut out);
        self.push(vec![c, r], Cow::Owned(out), Op::Transpose(a))
    }

    /// `x · w + b` with `w: [in×out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    // ---- normalisation -----------------------------------------------

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = vec![0.0; self.nodes[a.0].value.len()];
        kernels::log_softmax_axis(&self.nodes[a.0].value, &shape, axis, &mut out);
        self.push(shape, Cow::Owned(out), Op::LogSoftmax { x: a, axis })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let axis = shape.len() - 1;
        let c = shape[axis];
        let mut out = self.nodes[a.0].value.to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        self.push(shape, Cow::Owned(out), Op::Softmax(a))
    }

    /// Per-row standardisation of a 2-D tensor (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", a)?;
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &va[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(vec![r, c], Cow::Owned(out), Op::LayerNorm { x: a, inv_std })
    }

    // ---- structural --------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    &self.nodes[first.0].shape,
                    &self.nodes[p.0].shape,
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        self.push(
            vec![r, total],
            Cow::Owned(out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                &self.nodes[a.0].shape,
                &[start, len],
            ));
        }
        let va = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&va[i * c + start..i * c + start + len]);
        }
        self.push(vec![r, len], Cow::Owned(out), Op::SliceCols { x: a, start })
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather", table)?;
        if ids.is_empty() {
            return Err(Error::invalid("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "id {bad} out of range for table of {v} rows"
            )));
        }
        let vt = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ---- convolutions ------------------------------------------------

    /// Stride-1 temporal convolution with symmetric zero padding.
    ///
    /// `x: [N×Cin]`, `w: [(K·Cin)×Cout]` laid out as `w[k][cin][cout]`, `K` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize) -> Result<Var> {
        let (n, cin) = self.dims2("conv1d", x)?;
        let (kc, cout) = self.dims2("conv1d", w)?;
        if kernel.is_multiple_of(2) || kc != kernel * cin {
            return Err(Error::shape(
                "conv1d",
                &self.nodes[x.0].shape,
                &self.nodes[w.0].shape,
            ));
        }
        let cols = im2col(&self.nodes[x.0].value, n, cin, kernel);
        let out = kernels::gemm_new(n, kc, cout, &cols, false, &self.nodes[w.0].value, false);
        self.push(
            vec![n, cout],
            Cow::Owned(out),
            Op::Conv1d { x, w, kernel, cols },
        )
    }

    /// Per-channel temporal convolution, `x: [N×C]`, `w: [K×C]`, `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c) = self.dims2("depthwise_conv1d", x)?;
        let (k, c2) = self.dims2("depthwise_conv1d", w)?;
        if k % 2 == 0 || c != c2 {
            return Err(Error::shape(
                "depthwise_conv1d",
                &self.nodes[x.0].shape,
                &self.nodes[w.0].shape,
            ));
        }
        let pad = k / 2;
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    out[t * c + ch] += vx[src * c + ch] * vw[j * c + ch];
                }
            }
        }
        self.push(vec![n, c], Cow::Owned(out), Op::DepthwiseConv1d { x, w })
    }

    // ---- similarity --------------------------------------------------

    /// Per-row cosine similarity of two `[N×D]` tensors, shape `[N]`.
    ///
    /// The denominator is `max(|a|·|b|, eps)` and the result is clamped to
    /// `[-1, 1]`. With `eps = None` a zero-norm row is a domain error.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: Option<f64>) -> Result<Var> {
        let (r, c) = self.dims2("row_cosine", a)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                "row_cosine",
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(r);
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let ra = &va[i * c..(i + 1) * c];
            let rb = &vb[i * c..(i + 1) * c];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let norm_a = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let norm_b = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let prod = norm_a * norm_b;
            let (denom, clamped) = match eps {
                Some(e) if prod < e => (e, true),
                Some(_) => (prod, false),
                None if prod == 0.0 => {
                    return Err(Error::Domain {
                        op: "row_cosine",
                        detail: format!("row {i} has zero norm and no epsilon guard"),
                    })
                }
                None => (prod, false),
            };
            // Rounding can push parallel rows a few ulps past ±1.
            out.push((dot / denom).clamp(-1.0, 1.0));
            stats.push(CosStats {
                norm_a,
                norm_b,
                denom,
                clamped,
            });
        }
        self.push(vec![r], Cow::Owned(out), Op::RowCosine { a, b, stats })
    }

    /// Appends a node whose value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(rule.name(), &shape, &[value.len()]));
        }
        self.push(
            shape,
            Cow::Owned(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of every tracked leaf with `∂loss/∂leaf`,
    /// adding to whatever a previous call left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::UntrackedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.leaf_grads[i], g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (a, b, bc, kind) = (*a, *b, *bc, *kind);
                if tracked(a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => {
                            accumulate_slice(&mut grads[a.0], g);
                            Vec::new()
                        }
                        Binary::Mul => {
                            let vb = val(b);
                            match bc {
                                Broadcast::Same => g.iter().zip(vb).map(|(x, y)| x * y).collect(),
                                Broadcast::Scalar => g.iter().map(|x| x * vb[0]).collect(),
                                Broadcast::Row => broadcast_map(g, vb, bc, |x, y| x * y),
                            }
                        }
                    };
                    if !ga.is_empty() {
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                if tracked(b) {
                    let sign = if kind == Binary::Sub { -1.0 } else { 1.0 };
                    let contrib: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.iter().map(|x| sign * x).collect(),
                        Binary::Mul => g.iter().zip(val(a)).map(|(x, y)| x * y).collect(),
                    };
                    let gb = match bc {
                        Broadcast::Same => contrib,
                        Broadcast::Scalar => vec![contrib.iter().sum()],
                        Broadcast::Row => {
                            let nb = val(b).len();
                            let mut gb = vec![0.0; nb];
                            for row in contrib.chunks_exact(nb) {
                                gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                            }
                            gb
                        }
                    };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Offset(a) => accumulate_slice(&mut grads[a.0], g),
            Op::Unary(kind, a) => {
                let va = val(*a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(va.iter().zip(node.value.iter()))
                    .map(|(gi, (&x, &y))| gi * kind.derivative(x, y))
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Matmul { a, b, tb } => {
                let (a, b, tb) = (*a, *b, *tb);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = node.shape[1];
                if tracked(a) {
                    // dA = G · op(B)ᵀ
                    gemm_into(&mut grads[a.0], (m, n, k), (g, false), (val(b), !tb));
                }
                if tracked(b) {
                    if tb {
                        // B is [n×k]: dB = Gᵀ · A
                        gemm_into(&mut grads[b.0], (n, m, k), (g, true), (val(a), false));
                    } else {
                        gemm_into(&mut grads[b.0], (k, m, n), (val(a), true), (g, false));
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut ga = vec![0.0; r * c];
                kernels::transpose(g, r, c, &mut ga);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).len()];
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_extents(&node.shape, *axis);
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let gs: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gs;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().expect("non-empty shape");
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let mean_g = gs.iter().sum::<f64>() / c as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if tracked(p) {
                        let rows = (0..r).map(|i| &g[i * total + off..i * total + off + w]);
                        match &mut grads[p.0] {
                            Some(acc) => {
                                for (dst, src) in acc.chunks_exact_mut(w).zip(rows) {
                                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                                }
                            }
                            slot => *slot = Some(rows.flatten().copied().collect()),
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let len = node.shape[1];
                let gx = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                for i in 0..r {
                    let dst = &mut gx[i * c + start..i * c + start + len];
                    dst.iter_mut().zip(&g[i * len..(i + 1) * len]).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
                accumulate(&mut grads[table.0], gt);
            }
            Op::Conv1d { x, w, kernel, cols } => {
                let (n, cin) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let cout = node.shape[1];
                let kc = kernel * cin;
                if tracked(*w) {
                    gemm_into(&mut grads[w.0], (kc, n, cout), (cols, true), (g, false));
                }
                if tracked(*x) {
                    let gcols = kernels::gemm_new(n, cout, kc, g, false, val(*w), true);
                    let gx = col2im(&gcols, n, cin, *kernel);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::DepthwiseConv1d { x, w } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let k = self.nodes[w.0].shape[0];
                let pad = k / 2;
                let vx = val(*x);
                let vw = val(*w);
                let mut gx = vec![0.0; n * c];
                let mut gw = vec![0.0; k * c];
                for t in 0..n {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            gx[src * c + ch] += g[t * c + ch] * vw[j * c + ch];
                            gw[j * c + ch] += g[t * c + ch] * vx[src * c + ch];
                        }
                    }
                }
                if tracked(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if tracked(*w) {
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::RowCosine { a, b, stats } => {
                let c = self.nodes[a.0].shape[1];
                let va = val(*a);
                let vb = val(*b);
                let y = &node.value;
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (i, s) in stats.iter().enumerate() {
                    let gi = g[i];
                    for j in 0..c {
                        let (x, z) = (va[i * c + j], vb[i * c + j]);
                        if s.clamped {
                            ga[i * c + j] = gi * z / s.denom;
                            gb[i * c + j] = gi * x / s.denom;
                        } else {
                            ga[i * c + j] = gi * (z / s.denom - y[i] * x / (s.norm_a * s.norm_a));
                            gb[i * c + j] = gi * (x / s.denom - y[i] * z / (s.norm_b * s.norm_b));
                        }
                    }
                }
                if tracked(*a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if tracked(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Custom { inputs, rule } => {
                let in_vals: Vec<&[f64]> = inputs.iter().map(|&v| val(v)).collect();
                let gs = rule.backward(&in_vals, &node.value, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let (true, Some(gv)) = (tracked(v), gv) {
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
        }
    }
}

fn broadcast_map(va: &[f64], vb: &[f64], bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
        Broadcast::Row => {
            let mut out = Vec::with_capacity(va.len());
            for row in va.chunks_exact(vb.len()) {
                out.extend(row.iter().zip(vb).map(|(&x, &y)| f(x, y)));
            }
            out
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn accumulate_slice(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Adds `op(A)·op(B)` (`[m×k]·[k×n]`) into the slot, writing a fresh
/// buffer when it is empty.
fn gemm_into(slot: &mut Option<Vec<f64>>, (m, k, n): (usize, usize, usize), a: (&[f64], bool), b: (&[f64], bool)) {
    match slot {
        Some(acc) => kernels::gemm(m, k, n, a.0, a.1, b.0, b.1, acc, 1.0),
        None => *slot = Some(kernels::gemm_new(m, k, n, a.0, a.1, b.0, b.1)),
    }
}

fn im2col(x: &[f64], n: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let kc = kernel * cin;
    let mut cols = vec![0.0; n * kc];
    for t in 0..n {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            cols[t * kc + j * cin..t * kc + (j + 1) * cin]
                .copy_from_slice(&x[src * cin..(src + 1) * cin]);
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let kc = kernel * cin;
    let mut x = vec![0.0; n * cin];
    for t in 0..n {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..cin {
                x[src * cin + ch] += cols[t * kc + j * cin + ch];
            }
        }
    }
    x
}
