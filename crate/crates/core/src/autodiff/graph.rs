//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse,
//! applying each op's vector-Jacobian product and summing contributions into
//! the parents.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Variable,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    BroadcastTo(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GatherCols { x: Var, idx: Rc<[usize]> },
    ScatterCols { x: Var, idx: Rc<[usize]> },
    LogSumExp(Var),
    MaxConst(Var, f64),
    TriSolve { t: Var, b: Var, lower: bool, unit: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Graph<'s> {
    /// Graph in evaluation mode.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_vars: HashMap::new(), training: false, buffer_updates: Vec::new() }
    }

    /// Graph in training mode: layers with batch statistics use the batch.
    pub fn training(store: &'s ParamStore) -> Self {
        Graph { training: true, ..Graph::new(store) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Queues a new value for a buffer, applied by the caller after the step.
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Leaf that receives a gradient from [`Graph::backward_wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let v = self.push(self.store.get(id).clone(), Op::Param, trainable);
        self.param_vars.insert(id, v);
        v
    }

    // ----- elementwise with broadcasting -----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(ta.shape(), tb.shape()).ok_or_else(|| Error::Shape {
            op: name,
            detail: format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
        })?;
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(out_shape, data)?
        } else {
            let sa = bcast_strides(ta.shape(), &out_shape);
            let sb = bcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::new(out_shape, data)?
        };
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain { op: "div", detail: "division by zero".into() });
        }
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    // ----- unary -----

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let node = &self.nodes[x.0];
        (node.value.map(f), node.requires_grad)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let (t, rg) = self.unary(x, f64::exp);
        if !t.is_finite() {
            return Err(Error::numeric("exp overflow"));
        }
        Ok(self.push(t, Op::Exp(x), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain { op: "log", detail: format!("argument {bad} is not positive") });
        }
        let (t, rg) = self.unary(x, f64::ln);
        Ok(self.push(t, Op::Log(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (t, rg) = self.unary(x, f64::tanh);
        Ok(self.push(t, Op::Tanh(x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let (t, rg) = self.unary(x, |v| -v);
        Ok(self.push(t, Op::Neg(x), rg))
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (t, rg) = self.unary(x, |v| c * v);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let (t, rg) = self.unary(x, |v| v + c);
        Ok(self.push(t, Op::Offset(x), rg))
    }

    /// Elementwise `max(x, c)`; the gradient flows only where `x > c`.
    pub fn max_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let (t, rg) = self.unary(x, |v| v.max(c));
        Ok(self.push(t, Op::MaxConst(x, c), rg))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        let t = self.value(x).transpose2();
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Solves `T y_r = b_r` for every row `b_r` of `b`, with `T` square and
    /// triangular. Only the triangle selected by `lower` is read; with `unit`
    /// the diagonal is taken to be one.
    pub fn tri_solve(&mut self, t: Var, b: Var, lower: bool, unit: bool) -> Result<Var> {
        let (n, n2) = self.value(t).dims2()?;
        let (_, d) = self.value(b).dims2()?;
        if n != n2 || d != n {
            return Err(Error::Shape {
                op: "tri_solve",
                detail: format!("matrix {:?}, rhs {:?}", self.shape(t), self.shape(b)),
            });
        }
        if !unit {
            let m = self.value(t);
            if (0..n).any(|i| m.get2(i, i) == 0.0) {
                return Err(Error::Domain { op: "tri_solve", detail: "singular triangular matrix".into() });
            }
        }
        let y = tri_solve_rows(self.value(t), self.value(b), lower, unit, false);
        let rg = self.rg(&[t, b]);
        Ok(self.push(y, Op::TriSolve { t, b, lower, unit }, rg))
    }

    // ----- reductions and shape ops -----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::Shape { op: "mean", detail: "empty tensor".into() });
        }
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Mean(x), rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Shape { op: "sum_axis", detail: format!("axis {axis} of {:?}", v.shape()) });
        }
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| Error::Shape {
            op: "mean_axis",
            detail: format!("axis {axis} of {:?}", self.shape(x)),
        })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if broadcast_shapes(v.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::Shape {
                op: "broadcast",
                detail: format!("cannot broadcast {:?} to {shape:?}", v.shape()),
            });
        }
        let sa = bcast_strides(v.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut data = vec![0.0; shape.iter().product()];
        let src = v.data();
        for_each_bcast(shape, &sa, &zeros, |o, ia, _| data[o] = src[ia]);
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::BroadcastTo(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape()),
            });
        }
        let (outer, full, inner) = split_at_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape { op: "concat", detail: "no inputs".into() })?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Shape { op: "concat", detail: format!("axis {axis} of {base_shape:?}") });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{s:?} does not match {base_shape:?} off axis {axis}"),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Columns `idx` of a rank-2 tensor, in that order.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::Index(format!("column {bad} of {cols}")));
        }
        let mut out = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = v.row(r);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let t = Tensor::new([rows, idx.len()], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::GatherCols { x, idx: idx.into() }, rg))
    }

    /// Places column `c` of `x` at column `idx[c]` of a zero `[rows, width]` matrix.
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2()?;
        if cols != idx.len() {
            return Err(Error::Shape { op: "scatter_cols", detail: format!("{cols} columns, {} targets", idx.len()) });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= width) {
            return Err(Error::Index(format!("column {bad} of {width}")));
        }
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (c, &j) in idx.iter().enumerate() {
                out[r * width + j] = v.get2(r, c);
            }
        }
        let t = Tensor::new([rows, width], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::ScatterCols { x, idx: idx.into() }, rg))
    }

    /// Log-sum-exp over the last axis, computed with max subtraction.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let inner = *v.shape().last().ok_or_else(|| Error::Shape {
            op: "logsumexp",
            detail: "scalar input".into(),
        })?;
        if inner == 0 {
            return Err(Error::Shape { op: "logsumexp", detail: "empty reduction axis".into() });
        }
        let out: Vec<f64> = v.data().chunks(inner).map(logsumexp_slice).collect();
        let t = Tensor::new(v.shape()[..v.rank() - 1].to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::LogSumExp(x), rg))
    }

    // ----- composites -----

    /// Row-wise `softmax(x / temperature)` of a `[batch, k]` tensor.
    pub fn softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        let lsm = self.log_softmax(logits, temperature)?;
        self.exp(lsm)
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain { op: "softmax", detail: format!("temperature {temperature} must be positive") });
        }
        let (rows, _) = self.value(logits).dims2()?;
        let z = self.scale(logits, 1.0 / temperature)?;
        let lse = self.logsumexp(z)?;
        let lse = self.reshape(lse, &[rows, 1])?;
        self.sub(z, lse)
    }

    // ----- backward -----

    /// Gradients of a scalar `loss` with respect to every trainable parameter
    /// of the store. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let leaf = self.run_backward(loss)?;
        let mut grads = BTreeMap::new();
        let mut reached = Vec::new();
        for id in self.store.trainable_ids() {
            let g = match self.param_vars.get(&id).and_then(|v| leaf.get(&v.0)) {
                Some(g) => {
                    reached.push(id);
                    g.clone()
                }
                None => Tensor::zeros(self.store.get(id).shape()),
            };
            grads.insert(id, g);
        }
        Ok(Gradients::new(grads, reached))
    }

    /// Gradients of `loss` with respect to the given leaves.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let leaf = self.run_backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| leaf.get(&v.0).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(*v))))
            .collect())
    }

    fn run_backward(&self, loss: Var) -> Result<HashMap<usize, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Variable | Op::Param => {
                    leaves.insert(i, g);
                }
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        Ok(leaves)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Input | Op::Variable | Op::Param => unreachable!(),
            Op::Add(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, reduce_to(&g, val(a).shape()));
                }
                if needs(b) {
                    self.accumulate(grads, *b, reduce_to(&g, val(b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, reduce_to(&g, val(a).shape()));
                }
                if needs(b) {
                    self.accumulate(grads, *b, reduce_to(&g, val(b).shape()).map(|v| -v));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(op, Op::Div(..));
                let (ta, tb) = (val(a), val(b));
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                let sa = bcast_strides(ta.shape(), g.shape());
                let sb = bcast_strides(tb.shape(), g.shape());
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                {
                    let (ga_d, gb_d) = (ga.data_mut(), gb.data_mut());
                    for_each_bcast(g.shape(), &sa, &sb, |o, ia, ib| {
                        if is_div {
                            ga_d[ia] += dg[o] / db[ib];
                            gb_d[ib] -= dg[o] * da[ia] / (db[ib] * db[ib]);
                        } else {
                            ga_d[ia] += dg[o] * db[ib];
                            gb_d[ib] += dg[o] * da[ia];
                        }
                    });
                }
                if needs(a) {
                    self.accumulate(grads, *a, ga);
                }
                if needs(b) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new([m, k], ga).expect("shape"));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new([k, n], gb).expect("shape"));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose2()),
            Op::Exp(x) => {
                let data = g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Log(x) => {
                let data = g.data().iter().zip(val(x).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Tanh(x) => {
                let data = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| c * v)),
            Op::Offset(x) | Op::Reshape(x) => {
                let shape = val(x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(shape).expect("shape"));
            }
            Op::MaxConst(x, c) => {
                let data = g.data().iter().zip(val(x).data()).map(|(&g, &x)| if x > *c { g } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(val(x).shape(), g.item())),
            Op::Mean(x) => {
                let n = val(x).numel() as f64;
                self.accumulate(grads, *x, Tensor::full(val(x).shape(), g.item() / n));
            }
            Op::SumAxis { x, axis } => {
                let shape = val(x).shape();
                let (outer, len, inner) = split_at_axis(shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx).expect("shape"));
            }
            Op::BroadcastTo(x) => self.accumulate(grads, *x, reduce_to(&g, val(x).shape())),
            Op::Slice { x, axis, start } => {
                let shape = val(x).shape();
                let (outer, full, inner) = split_at_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx).expect("shape"));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(g.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(val(p).shape(), gp).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::GatherCols { x, idx } => {
                let (rows, cols) = (val(x).shape()[0], val(x).shape()[1]);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for (c, &j) in idx.iter().enumerate() {
                        gx[r * cols + j] += g.get2(r, c);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([rows, cols], gx).expect("shape"));
            }
            Op::ScatterCols { x, idx } => {
                let rows = val(x).shape()[0];
                let mut gx = Vec::with_capacity(rows * idx.len());
                for r in 0..rows {
                    gx.extend(idx.iter().map(|&j| g.get2(r, j)));
                }
                self.accumulate(grads, *x, Tensor::new([rows, idx.len()], gx).expect("shape"));
            }
            Op::LogSumExp(x) => {
                let tx = val(x);
                let inner = *tx.shape().last().expect("rank >= 1");
                let mut gx = vec![0.0; tx.numel()];
                for (r, chunk) in tx.data().chunks(inner).enumerate() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for (j, &v) in chunk.iter().enumerate() {
                        gx[r * inner + j] = gr * (v - lse).exp();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), gx).expect("shape"));
            }
            Op::TriSolve { t, b, lower, unit } => {
                let tm = val(t);
                let gb = tri_solve_rows(tm, &g, *lower, *unit, true);
                if needs(t) {
                    let n = tm.shape()[0];
                    let mut gt = vec![0.0; n * n];
                    let rows = g.shape()[0];
                    for r in 0..rows {
                        let (gr, yr) = (gb.row(r), out.row(r));
                        for i in 0..n {
                            let js = if *lower { 0..i + usize::from(!unit) } else { i + usize::from(*unit)..n };
                            for j in js {
                                gt[i * n + j] -= gr[i] * yr[j];
                            }
                        }
                    }
                    self.accumulate(grads, *t, Tensor::new([n, n], gt).expect("shape"));
                }
                if needs(b) {
                    self.accumulate(grads, *b, gb);
                }
            }
        }
    }
}

pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Solves each row of `b` against triangular `t` (or its transpose).
fn tri_solve_rows(t: &Tensor, b: &Tensor, lower: bool, unit: bool, transpose: bool) -> Tensor {
    let n = t.shape()[0];
    let rows = b.shape()[0];
    let m = |i: usize, j: usize| if transpose { t.get2(j, i) } else { t.get2(i, j) };
    let forward = lower != transpose;
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let rhs = b.row(r);
        let y = &mut out[r * n..(r + 1) * n];
        let order: Box<dyn Iterator<Item = usize>> = if forward { Box::new(0..n) } else { Box::new((0..n).rev()) };
        for i in order {
            let mut acc = rhs[i];
            let js = if forward { 0..i } else { i + 1..n };
            for j in js {
                acc -= m(i, j) * y[j];
            }
            y[i] = if unit { acc } else { acc / m(i, i) };
        }
    }
    Tensor::new([rows, n], out).expect("shape")
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed inside the broadcast `out` shape.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = s;
        }
        s *= shape[i];
    }
    strides
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let Some(last) = out.len().checked_sub(1) else {
        f(0, 0, 0);
        return;
    };
    let inner = out[last];
    let (ja, jb) = (sa[last], sb[last]);
    let mut idx = vec![0; last];
    let (mut ia, mut ib) = (0, 0);
    for block in 0..n / inner {
        let o = block * inner;
        for j in 0..inner {
            f(o + j, ia + j * ja, ib + j * jb);
        }
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let sa = bcast_strides(shape, g.shape());
    let zeros = vec![0; g.rank()];
    let mut out = Tensor::zeros(shape);
    let (od, gd) = (out.data_mut(), g.data());
    for_each_bcast(g.shape(), &sa, &zeros, |o, ia, _| od[ia] += gd[o]);
    out
}
