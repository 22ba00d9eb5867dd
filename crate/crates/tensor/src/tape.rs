//! Record-on-execute gradient tape.
//!
//! Every forward op appends a node holding its output value and enough of its
//! inputs to run the backward rule. [`Tape::backward`] walks the nodes in
//! reverse order once; after that the tape is consumed and must be cleared
//! (or dropped) before it records again.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::{axis_split, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Scope label given to ops recorded without an explicit scope.
pub const MAIN_SCOPE: &str = "main";

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    trainable: bool,
    scope: &'static str,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
    scope: &'static str,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            scope: MAIN_SCOPE,
        }
    }

    /// Drops every node and re-arms the tape for recording.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.scope = MAIN_SCOPE;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Sets the label attached to subsequently recorded ops and returns the
    /// previous one.
    pub fn set_scope(&mut self, scope: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Number of recorded non-leaf ops.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Non-leaf op counts grouped by scope label.
    pub fn op_counts_by_scope(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)) {
            *out.entry(n.scope).or_insert(0) += 1;
        }
        out
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        self.ensure_recording()?;
        Ok(self.push_node(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
            scope: self.scope,
        }))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Copies `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index()].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Gradient accumulated on `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        self.check(v)?;
        let node = &self.nodes[v.index()];
        Ok(node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        }))
    }

    pub fn is_trainable(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes[v.index()].trainable)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    fn ensure_recording(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push_node(&mut self, node: Node) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(node);
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        self.ensure_recording()?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.index()].requires_grad);
        Ok(self.push_node(Node {
            value,
            grad: None,
            op,
            requires_grad,
            trainable: false,
            scope: self.scope,
        }))
    }

    fn vals(&self, v: Var) -> Result<&Tensor> {
        self.value(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.vals(a)?.shape(), self.vals(b)?.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.vals(a)?, self.vals(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn map_unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.vals(a)?.map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vr) = (self.vals(a)?, self.vals(row)?);
        let n = *va.shape().last().unwrap_or(&1);
        if vr.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let r = vr.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % n]))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, row])
    }

    /// Adds `row` (extent = trailing dimension of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.vals(a)?, self.vals(b)?);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.vals(a)?;
        if va.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects rank 2, got shape {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.vals(a)?.clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `ln(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary("log_sigmoid", a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map_unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map_unary("abs", a, Op::Abs(a), f64::abs)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.vals(a)?.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(axis_split(shape, axis))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", a, axis)?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let va = self.vals(a)?;
        let mut out = va.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (d[at(k)] - max).exp();
                    d[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    d[at(k)] /= total;
                }
            }
        }
        self.push("softmax", out, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("log_softmax", a, axis)?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let mut out = self.vals(a)?.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|k| (d[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..n {
                    d[at(k)] -= lse;
                }
            }
        }
        self.push("log_softmax", out, Op::LogSoftmax(a, axis), &[a])
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = self.vals(a)?;
        let n = *va.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        let mut out = va.clone();
        let rows = out.len() / n;
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        self.push("layer_norm", out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.vals(a)?.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.vals(a)?;
        if va.is_empty() {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over `axis`, dropping it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("sum_axis", a, axis)?;
        let va = self.vals(a)?;
        let src = va.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = va.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    /// Selects rows (leading-axis slices) of `a` by index; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.vals(a)?;
        let rows = va.rows();
        let cols = va.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&va.data()[i * cols..(i + 1) * cols]);
        }
        let mut shape = va.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        let out = Tensor::new(shape, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero parts".into()))?;
        let base = self.vals(first)?.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.vals(p)?.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let vp = self.vals(p)?;
                let n = vp.shape()[axis];
                data.extend_from_slice(&vp.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("narrow", a, axis)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: n,
            });
        }
        let va = self.vals(a)?;
        let src = va.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push("narrow", out, Op::Narrow { x: a, axis, start }, &[a])
    }

    /// Reverse sweep from a scalar `root`, populating gradients on every node
    /// that depends on a trainable leaf. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.ensure_recording()?;
        self.check(root)?;
        let root_shape = self.nodes[root.index()].value.shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed = true;
        if !self.nodes[root.index()].requires_grad {
            return Ok(());
        }
        self.nodes[root.index()].grad = Some(vec![1.0]);
        for idx in (0..=root.index()).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, node, g);
        }
        Ok(())
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

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `c = a·b + beta·c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every offset touched by dgemm lies inside the slices given the
    // extents and strides passed here; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds `update` into the gradient buffer of `v` if it takes gradients.
fn accumulate(before: &mut [Node], v: Var, update: impl FnOnce(&mut [f64], &Tensor)) {
    let node = &mut before[v.index()];
    if !node.requires_grad {
        return;
    }
    let len = node.value.len();
    let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
    update(grad, &node.value);
}

fn value_of(before: &[Node], v: Var) -> &Tensor {
    &before[v.index()].value
}

fn propagate(before: &mut [Node], node: &Node, g: &[f64]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(before, *a, |ga, _| add_into(ga, g));
            accumulate(before, *b, |gb, _| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(before, *a, |ga, _| add_into(ga, g));
            accumulate(before, *b, |gb, _| {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let vb = value_of(before, *b).data().to_vec();
            let va = value_of(before, *a).data().to_vec();
            accumulate(before, *a, |ga, _| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            accumulate(before, *b, |gb, _| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let vb = value_of(before, *b).data().to_vec();
            accumulate(before, *a, |ga, _| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / vb[i];
                }
            });
            accumulate(before, *b, |gb, _| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * out[i] / vb[i];
                }
            });
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(node.op, Op::Minimum(..));
            let va = value_of(before, *a).data().to_vec();
            let vb = value_of(before, *b).data().to_vec();
            let pick_a: Vec<bool> = va
                .iter()
                .zip(&vb)
                .map(|(x, y)| if is_min { x <= y } else { x >= y })
                .collect();
            accumulate(before, *a, |ga, _| {
                for i in 0..ga.len() {
                    if pick_a[i] {
                        ga[i] += g[i];
                    }
                }
            });
            accumulate(before, *b, |gb, _| {
                for i in 0..gb.len() {
                    if !pick_a[i] {
                        gb[i] += g[i];
                    }
                }
            });
        }
        Op::AddRow(a, row) => {
            accumulate(before, *a, |ga, _| add_into(ga, g));
            accumulate(before, *row, |gr, _| {
                let n = gr.len();
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi;
                }
            });
        }
        Op::MulRow(a, row) => {
            let vr = value_of(before, *row).data().to_vec();
            let va = value_of(before, *a).data().to_vec();
            let n = vr.len();
            accumulate(before, *a, |ga, _| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vr[i % n];
                }
            });
            accumulate(before, *row, |gr, _| {
                for i in 0..g.len() {
                    gr[i % n] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(before, *a, |ga, _| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(before, *a, |ga, _| add_into(ga, g));
        }
        Op::MatMul(a, b) => {
            let (m, k) = {
                let s = value_of(before, *a).shape();
                (s[0], s[1])
            };
            let n = value_of(before, *b).shape()[1];
            if before[a.index()].requires_grad {
                let vb = value_of(before, *b).data().to_vec();
                accumulate(before, *a, |ga, _| {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n as isize, 1), &vb, (1, n as isize), ga, 1.0);
                });
            }
            if before[b.index()].requires_grad {
                let va = value_of(before, *a).data().to_vec();
                accumulate(before, *b, |gb, _| {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &va, (1, k as isize), g, (n as isize, 1), gb, 1.0);
                });
            }
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let (r, c) = (s[0], s[1]);
            accumulate(before, *a, |ga, _| {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        Op::Sigmoid(a) => accumulate(before, *a, |ga, _| {
            for i in 0..ga.len() {
                ga[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::LogSigmoid(a) => accumulate(before, *a, |ga, va| {
            for i in 0..ga.len() {
                ga[i] += g[i] * sigmoid(-va.data()[i]);
            }
        }),
        Op::Relu(a) => accumulate(before, *a, |ga, va| {
            for i in 0..ga.len() {
                if va.data()[i] > 0.0 {
                    ga[i] += g[i];
                }
            }
        }),
        Op::Exp(a) => accumulate(before, *a, |ga, _| {
            for i in 0..ga.len() {
                ga[i] += g[i] * out[i];
            }
        }),
        Op::Log(a) => accumulate(before, *a, |ga, va| {
            for i in 0..ga.len() {
                ga[i] += g[i] / va.data()[i];
            }
        }),
        Op::Abs(a) => accumulate(before, *a, |ga, va| {
            for i in 0..ga.len() {
                let x = va.data()[i];
                if x > 0.0 {
                    ga[i] += g[i];
                } else if x < 0.0 {
                    ga[i] -= g[i];
                }
            }
        }),
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(node.value.shape(), *axis);
            accumulate(before, *a, |ga, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            ga[at(k)] += out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, n, inner) = axis_split(node.value.shape(), *axis);
            accumulate(before, *a, |ga, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            ga[at(k)] += g[at(k)] - out[at(k)].exp() * total;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, inv_std } => {
            let n = *node.value.shape().last().unwrap_or(&1);
            accumulate(before, *x, |ga, _| {
                for (r, &rstd) in inv_std.iter().enumerate() {
                    let gy = &g[r * n..(r + 1) * n];
                    let y = &out[r * n..(r + 1) * n];
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for k in 0..n {
                        ga[r * n + k] += rstd * (gy[k] - mean_g - y[k] * mean_gy);
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(before, *a, |ga, _| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::Mean(a) => accumulate(before, *a, |ga, _| {
            let s = g[0] / ga.len() as f64;
            for x in ga.iter_mut() {
                *x += s;
            }
        }),
        Op::SumAxis(a, axis) => accumulate(before, *a, |ga, va| {
            let (outer, n, inner) = axis_split(va.shape(), *axis);
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    for i in 0..inner {
                        ga[base + i] += g[o * inner + i];
                    }
                }
            }
        }),
        Op::GatherRows(a, idx) => accumulate(before, *a, |ga, va| {
            let cols = va.cols();
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..cols {
                    ga[src * cols + c] += g[r * cols + c];
                }
            }
        }),
        Op::Concat(parts, axis) => {
            let shape = node.value.shape();
            let (outer, total, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            for p in parts {
                let n = value_of(before, *p).shape()[*axis];
                accumulate(before, *p, |gp, _| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * n * inner;
                        for i in 0..n * inner {
                            gp[dst + i] += g[src + i];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let len = node.value.shape()[*axis];
            let start = *start;
            accumulate(before, *x, |gx, vx| {
                let (outer, n, inner) = axis_split(vx.shape(), *axis);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}
