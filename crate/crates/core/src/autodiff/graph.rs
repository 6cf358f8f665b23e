//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Exp,
    Log,
    Softplus,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(Unary, Var),
    Softmax { x: Var, axis: usize },
    ReduceAxis { op: Reduce, x: Var, axis: usize },
    ReduceAll(Reduce, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    GroupMean { x: Var, group: usize },
    RepeatRows { x: Var, times: usize },
    Attention(Box<AttentionSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    layout: AttentionLayout,
    /// Softmax weights, indexed `[group][head][query][key]`.
    probs: Vec<f64>,
}

/// How rows of the query/key tensors are partitioned into independent
/// attention problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    /// Number of independent groups (tasks) in the batch.
    pub groups: usize,
    /// Query rows per group.
    pub queries: usize,
    /// Key/value rows per group.
    pub keys: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass and, after [`Graph::backward`], its gradients.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            grads: None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
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

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Constant input that still receives a gradient (for probing
    /// sensitivities with respect to data).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf for a trainable tensor. Repeated calls for the same id return
    /// the same node, so each parameter's gradient is accumulated in one
    /// place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dims_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        super::tensor::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// Elementwise binary op. Shapes must match unless one side holds a
    /// single element, which is broadcast.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(dims_err("elementwise", ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.is_scalar() { t.data()[0] } else { t.data()[i] };
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        if op == Binary::Div && !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("division produced a non-finite value".into()));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(op, a, b), ng))
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

    /// `x[i, j] + bias[j]` for `x: [m, n]` and a bias holding `n` values.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return Err(dims_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(t, Op::AddConst(x), ng)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::Numeric(format!("{op:?} applied to a non-finite input")));
        }
        let out = match op {
            Unary::Tanh => t.map(f64::tanh),
            Unary::Relu => t.map(|v| v.max(0.0)),
            Unary::Exp => t.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Numeric(format!("log of non-positive value {bad}")));
                }
                t.map(f64::ln)
            }
            Unary::Softplus => t.map(softplus),
            Unary::Square => t.map(|v| v * v),
        };
        if !out.is_finite() {
            return Err(Error::Numeric(format!("{op:?} overflowed")));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Unary(op, x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Sum or mean along `axis`; the axis is removed from the result.
    pub fn reduce(&mut self, op: Reduce, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if op == Reduce::Mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::ReduceAxis { op, x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::ReduceAll(Reduce::Sum, x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::ReduceAll(Reduce::Mean, x), ng)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).dims2()?;
            if r != rows {
                return Err(dims_err("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(rows, len, data)?, Op::SliceCols { x, start }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(c, r, data)?, Op::Transpose(x), ng))
    }

    /// Mean over consecutive blocks of `group` rows: `[g * group, d] -> [g, d]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension(format!(
                "cannot split {rows} rows into groups of {group}"
            )));
        }
        let src = self.value(x).data();
        let n = rows / group;
        let mut data = vec![0.0; n * cols];
        for (i, row) in src.chunks(cols).enumerate() {
            let dst = &mut data[(i / group) * cols..(i / group + 1) * cols];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= group as f64);
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(n, cols, data)?, Op::GroupMean { x, group }, ng))
    }

    /// Repeats every row `times` times consecutively: `[n, d] -> [n * times, d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if times == 0 {
            return Err(Error::Dimension("repeat_rows with zero repetitions".into()));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * times * cols);
        for i in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(t.row(i));
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(rows * times, cols, data)?,
            Op::RepeatRows { x, times },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention, computed independently for
    /// each group of rows.
    ///
    /// `q: [groups * queries, d]`, `k: [groups * keys, d]`,
    /// `v: [groups * keys, dv]`; head `h` uses columns `h*d/heads..` of q/k
    /// and `h*dv/heads..` of v. The result is `[groups * queries, dv]` with
    /// heads concatenated along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let AttentionLayout {
            heads,
            groups,
            queries,
            keys,
        } = layout;
        let (qr, d) = self.value(q).dims2()?;
        let (kr, dk) = self.value(k).dims2()?;
        let (vr, dv) = self.value(v).dims2()?;
        if heads == 0 || queries == 0 || keys == 0 {
            return Err(Error::Dimension(format!("degenerate attention layout {layout:?}")));
        }
        if d != dk || qr != groups * queries || kr != groups * keys || vr != kr {
            return Err(Error::Dimension(format!(
                "attention {layout:?}: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if d % heads != 0 || dv % heads != 0 {
            return Err(Error::Dimension(format!(
                "{heads} heads do not divide widths {d} / {dv}"
            )));
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * queries * keys];
        let mut out = vec![0.0; qr * dv];
        let mut scores = vec![0.0; keys];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..queries {
                    let qrow = &qd[(g * queries + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(g * keys + j) * d + h * dh..][..dh];
                        *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let p = &mut probs[((g * heads + h) * queries + i) * keys..][..keys];
                    let mut total = 0.0;
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = (s - max).exp();
                        total += *pj;
                    }
                    p.iter_mut().for_each(|pj| *pj /= total);
                    let orow = &mut out[(g * queries + i) * dv + h * dvh..][..dvh];
                    for (j, pj) in p.iter().enumerate() {
                        let vrow = &vd[(g * keys + j) * dv + h * dvh..][..dvh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            layout,
            probs,
        };
        Ok(self.push(
            Tensor::matrix(qr, dv, out)?,
            Op::Attention(Box::new(saved)),
            ng,
        ))
    }

    /// Softmax weights of an attention node, `[group][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(saved) => Some(&saved.probs),
            _ => None,
        }
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// May be called once per graph; a second call is rejected so that
    /// gradients are never silently doubled.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// One gradient per parameter in store order; parameters that did not
    /// take part in this graph get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|&v| self.grad(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot => *slot = Some(contrib),
        }
    }

    /// Gradient contribution of a broadcast-capable binary operand.
    fn reduce_to(&self, v: Var, full: Vec<f64>, shape: &[usize]) -> Tensor {
        let target = self.value(v);
        if target.shape() == shape {
            Tensor::new(shape.to_vec(), full).expect("same shape")
        } else {
            Tensor::new(target.shape().to_vec(), vec![full.iter().sum()]).expect("scalar operand")
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Input | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                if self.ng(a) {
                    let mut ga = vec![0.0; m * k];
                    super::tensor::gemm(m, n, k, g.data(), false, self.value(b).data(), true, 0.0, &mut ga);
                    self.accumulate(grads, a, Tensor::matrix(m, k, ga)?);
                }
                if self.ng(b) {
                    let mut gb = vec![0.0; k * n];
                    super::tensor::gemm(k, m, n, self.value(a).data(), true, g.data(), false, 0.0, &mut gb);
                    self.accumulate(grads, b, Tensor::matrix(k, n, gb)?);
                }
            }
            &Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let at = |t: &Tensor, i: usize| if t.is_scalar() { t.data()[0] } else { t.data()[i] };
                let n = g.numel();
                let gd = g.data();
                let (da, db): (Vec<f64>, Vec<f64>) = match op {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                    Binary::Mul => (
                        (0..n).map(|i| gd[i] * at(tb, i)).collect(),
                        (0..n).map(|i| gd[i] * at(ta, i)).collect(),
                    ),
                    Binary::Div => (
                        (0..n).map(|i| gd[i] / at(tb, i)).collect(),
                        (0..n).map(|i| -gd[i] * at(ta, i) / (at(tb, i) * at(tb, i))).collect(),
                    ),
                };
                let ga = self.reduce_to(a, da, g.shape());
                let gb = self.reduce_to(b, db, g.shape());
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::AddBias(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.ng(bias) {
                    let (_, n) = g.dims2()?;
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(bias).to_vec();
                    self.accumulate(grads, bias, Tensor::new(shape, gb)?);
                }
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            &Op::AddConst(x) => self.accumulate(grads, x, g.clone()),
            &Op::Unary(op, x) => {
                let xin = self.value(x).data();
                let y = out.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        gi * match op {
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Relu => {
                                if xin[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / xin[i],
                            Unary::Softplus => sigmoid(xin[i]),
                            Unary::Square => 2.0 * xin[i],
                        }
                    })
                    .collect();
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d)?);
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), axis)?;
                let (y, gd) = (out.data(), g.data());
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| y[idx(j)] * gd[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(out.shape().to_vec(), d)?);
            }
            &Op::ReduceAxis { op, x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = axis_extents(&shape, axis)?;
                let factor = if op == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                let gd = g.data();
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = gd[o * inner + i] * factor;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(shape, d)?);
            }
            &Op::ReduceAll(op, x) => {
                let t = self.value(x);
                let factor = if op == Reduce::Mean { 1.0 / t.numel() as f64 } else { 1.0 };
                self.accumulate(grads, x, Tensor::full(t.shape(), g.item() * factor));
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &x in xs {
                    let (_, c) = self.value(x).dims2()?;
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + offset..][..c]);
                        }
                        self.accumulate(grads, x, Tensor::matrix(rows, c, d)?);
                    }
                    offset += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(x).dims2()?;
                let (_, len) = g.dims2()?;
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    d[i * cols + start..][..len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, x, Tensor::matrix(rows, cols, d)?);
            }
            &Op::Transpose(x) => {
                let (r, c) = g.dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, x, Tensor::matrix(c, r, d)?);
            }
            &Op::GroupMean { x, group } => {
                let (rows, cols) = self.value(x).dims2()?;
                let mut d = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    d.extend(g.row(i / group).iter().map(|v| v / group as f64));
                }
                self.accumulate(grads, x, Tensor::matrix(rows, cols, d)?);
            }
            &Op::RepeatRows { x, times } => {
                let (rows, cols) = self.value(x).dims2()?;
                let mut d = vec![0.0; rows * cols];
                for (i, row) in g.data().chunks(cols).enumerate() {
                    for (acc, v) in d[(i / times) * cols..][..cols].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, x, Tensor::matrix(rows, cols, d)?);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads)?,
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        saved: &AttentionSaved,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let AttentionLayout {
            heads,
            groups,
            queries,
            keys,
        } = saved.layout;
        let (tq, tk, tv) = (self.value(saved.q), self.value(saved.k), self.value(saved.v));
        let (_, d) = tq.dims2()?;
        let (_, dv) = tv.dims2()?;
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dvv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; keys];
        for grp in 0..groups {
            for h in 0..heads {
                for i in 0..queries {
                    let p = &saved.probs[((grp * heads + h) * queries + i) * keys..][..keys];
                    let grow = &gd[(grp * queries + i) * dv + h * dvh..][..dvh];
                    for j in 0..keys {
                        let vrow = (grp * keys + j) * dv + h * dvh;
                        dp[j] = grow.iter().zip(&vd[vrow..vrow + dvh]).map(|(a, b)| a * b).sum();
                        for (acc, gv) in dvv[vrow..vrow + dvh].iter_mut().zip(grow) {
                            *acc += p[j] * gv;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qrow = (grp * queries + i) * d + h * dh;
                    for j in 0..keys {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (grp * keys + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kd[krow + c];
                            dk[krow + c] += ds * qd[qrow + c];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, saved.q, Tensor::new(tq.shape().to_vec(), dq)?);
        self.accumulate(grads, saved.k, Tensor::new(tk.shape().to_vec(), dk)?);
        self.accumulate(grads, saved.v, Tensor::new(tv.shape().to_vec(), dvv)?);
        Ok(())
    }
}
