//! Define-by-run reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! enough context to compute local partials. Node inputs always refer to
//! earlier nodes, so a single reverse sweep over the node list is a valid
//! topological order for [`Tape::backward`].
//!
//! Parameters are registered with [`Tape::param`], which borrows the tensor
//! instead of copying it; a tape is therefore cheap to rebuild per example.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, TensorCheck};

use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use std::borrow::Cow;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: index {index} out of range for bound {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: needs at least one input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Row(Var, usize),
    Slice { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    Embedding { table: Var, bags: Vec<Vec<usize>> },
    Dropout { input: Var, mask: Tensor },
    ScatterAdd { base: Var, values: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn shapes(ts: &[&Tensor]) -> Vec<Vec<usize>> {
    ts.iter().map(|t| t.shape().to_vec()).collect()
}

/// Matmul operand dims: a vector on the left is a row, on the right a column.
fn lhs_dims(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

fn rhs_dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (*n, 1),
        _ => t.dims2(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value: Cow::Owned(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable tensor without copying it.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Cow::Borrowed(t), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned trainable tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Cow::Owned(t), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Cow::Owned(t), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product. A rank-1 left operand acts as a row vector, a rank-1
    /// right operand as a column vector; the result drops those unit axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (r, k) = lhs_dims(at);
        let (k2, c) = rhs_dims(bt);
        if k != k2 || at.rank() > 2 || bt.rank() > 2 {
            return Err(AutogradError::Shape { op: "matmul", shapes: shapes(&[at, bt]) });
        }
        let mut out = vec![0.0; r * c];
        gemm_acc(at.data(), bt.data(), &mut out, r, k, c);
        let shape = match (at.rank(), bt.rank()) {
            (1, 1) => vec![1],
            (1, _) => vec![c],
            (_, 1) => vec![r],
            _ => vec![r, c],
        };
        let value = Tensor::new(shape, out).expect("matmul output shape");
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.rank() != 2 {
            return Err(AutogradError::Shape { op: "transpose", shapes: shapes(&[at]) });
        }
        let value = at.transpose();
        Ok(self.push(Op::Transpose(a), value, &[a]))
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the rows of matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let value = if at.same_shape(bt) {
            let mut v = at.clone();
            v.add_assign(bt);
            v
        } else if at.rank() == 2 && bt.rank() == 1 && at.shape()[1] == bt.len() {
            let mut v = at.clone();
            let c = bt.len();
            for row in v.data_mut().chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(bt.data()) {
                    *x += y;
                }
            }
            v
        } else {
            return Err(AutogradError::Shape { op: "add", shapes: shapes(&[at, bt]) });
        };
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) {
            return Err(AutogradError::Shape { op: "mul", shapes: shapes(&[at, bt]) });
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(at.shape().to_vec(), data).expect("mul shape");
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    /// Softmax over a vector, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.rank() != 1 {
            return Err(AutogradError::Shape { op: "softmax", shapes: shapes(&[at]) });
        }
        let value = Tensor::vector(softmax(at.data()));
        Ok(self.push(Op::Softmax(a), value, &[a]))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutogradError::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(AutogradError::Shape { op: "concat", shapes: shapes(&[t]) });
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), parts))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(AutogradError::Empty { op: "stack" })?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != width {
                let first_t = self.value(*first);
                return Err(AutogradError::Shape { op: "stack", shapes: shapes(&[first_t, t]) });
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), width, data);
        Ok(self.push(Op::Stack(rows.to_vec()), value, rows))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let at = self.value(a);
        if at.rank() != 2 {
            return Err(AutogradError::Shape { op: "row", shapes: shapes(&[at]) });
        }
        if i >= at.shape()[0] {
            return Err(AutogradError::Index { op: "row", index: i, bound: at.shape()[0] });
        }
        let value = Tensor::vector(at.row(i).to_vec());
        Ok(self.push(Op::Row(a, i), value, &[a]))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        if at.rank() != 1 || len == 0 || start + len > at.len() {
            return Err(AutogradError::Shape { op: "slice", shapes: vec![at.shape().to_vec(), vec![start, len]] });
        }
        let value = Tensor::vector(at.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { input: a, start }, value, &[a]))
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        if at.rank() != 2 || len == 0 || start + len > at.shape()[0] {
            return Err(AutogradError::Shape { op: "slice_rows", shapes: vec![at.shape().to_vec(), vec![start, len]] });
        }
        let c = at.shape()[1];
        let value = Tensor::matrix(len, c, at.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(Op::SliceRows { input: a, start }, value, &[a]))
    }

    /// Looks up rows of `table`; each output row is the sum of the rows named in its bag.
    pub fn embedding(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(AutogradError::Shape { op: "embedding", shapes: shapes(&[tt]) });
        }
        if bags.is_empty() {
            return Err(AutogradError::Empty { op: "embedding" });
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = vec![0.0; bags.len() * d];
        for (out_row, bag) in data.chunks_mut(d).zip(&bags) {
            for &id in bag {
                if id >= vocab {
                    return Err(AutogradError::Index { op: "embedding", index: id, bound: vocab });
                }
                for (o, x) in out_row.iter_mut().zip(tt.row(id)) {
                    *o += x;
                }
            }
        }
        let value = Tensor::matrix(bags.len(), d, data);
        Ok(self.push(Op::Embedding { table, bags }, value, &[table]))
    }

    /// Multiplies by a fixed, pre-scaled dropout mask.
    pub fn dropout(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let at = self.value(a);
        if !at.same_shape(&mask) {
            return Err(AutogradError::Shape { op: "dropout", shapes: shapes(&[at, &mask]) });
        }
        let data = at.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(at.shape().to_vec(), data).expect("dropout shape");
        Ok(self.push(Op::Dropout { input: a, mask }, value, &[a]))
    }

    /// `base` plus `values[j]` added at position `indices[j]`; repeated indices accumulate.
    pub fn scatter_add(&mut self, base: Var, values: Var, indices: Vec<usize>) -> Result<Var> {
        let (bt, vt) = (self.value(base), self.value(values));
        if bt.rank() != 1 || vt.rank() != 1 || vt.len() != indices.len() {
            return Err(AutogradError::Shape {
                op: "scatter_add",
                shapes: vec![bt.shape().to_vec(), vt.shape().to_vec(), vec![indices.len()]],
            });
        }
        let mut value = bt.clone();
        for (&i, &x) in indices.iter().zip(vt.data()) {
            if i >= value.len() {
                return Err(AutogradError::Index { op: "scatter_add", index: i, bound: value.len() });
            }
            value.data_mut()[i] += x;
        }
        Ok(self.push(Op::ScatterAdd { base, values, indices }, value, &[base, values]))
    }

    /// `-log softmax(logits)[target]`, computed in one fused, stabilized step.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rank() != 1 {
            return Err(AutogradError::Shape { op: "cross_entropy", shapes: shapes(&[lt]) });
        }
        if target >= lt.len() {
            return Err(AutogradError::Index { op: "cross_entropy", index: target, bound: lt.len() });
        }
        let lse = log_sum_exp(lt.data());
        let loss = lse - lt.data()[target];
        let probs = lt.data().iter().map(|x| (x - lse).exp()).collect();
        Ok(self.push(Op::CrossEntropy { logits, target, probs }, Tensor::scalar(loss), &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        self.push(Op::SumSquares(a), value, &[a])
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let joined = self.concat(terms)?;
        Ok(self.sum(joined))
    }

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutogradError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]).expect("scalar"));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (r, k) = lhs_dims(at);
                let (_, c) = rhs_dims(bt);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt_acc(g.data(), bt.data(), ga.data_mut(), r, c, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(at.data(), g.data(), gb.data_mut(), r, k, c);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                let broadcast = !self.value(*a).same_shape(self.value(*b));
                if let Some(gb) = self.acc(grads, *b) {
                    if broadcast {
                        let c = gb.len();
                        for row in g.data().chunks(c) {
                            for (x, y) in gb.data_mut().iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    } else {
                        gb.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gi * f;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let dot: f64 = g.data().iter().zip(out.data()).map(|(gi, y)| gi * y).sum();
                    for ((x, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *x += y * (gi - dot);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.add_assign(&Tensor::vector(g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Stack(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    if let Some(gr) = self.acc(grads, *r) {
                        for (x, y) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Row(a, i) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = g.len();
                    for (x, y) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            Op::Slice { input, start } => {
                if let Some(ga) = self.acc(grads, *input) {
                    for (x, y) in ga.data_mut()[*start..*start + g.len()].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            Op::SliceRows { input, start } => {
                if let Some(ga) = self.acc(grads, *input) {
                    let c = ga.shape()[1];
                    for (x, y) in ga.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            Op::Embedding { table, bags } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = gt.shape()[1];
                    for (i, bag) in bags.iter().enumerate() {
                        let grow = g.row(i);
                        for &id in bag {
                            for (x, y) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(grow) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(ga) = self.acc(grads, *input) {
                    for ((x, gi), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                        *x += gi * m;
                    }
                }
            }
            Op::ScatterAdd { base, values, indices } => {
                if let Some(gb) = self.acc(grads, *base) {
                    gb.add_assign(g);
                }
                if let Some(gv) = self.acc(grads, *values) {
                    for (x, &i) in gv.data_mut().iter_mut().zip(indices) {
                        *x += g.data()[i];
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = g.item();
                    for (x, p) in gl.data_mut().iter_mut().zip(probs) {
                        *x += s * p;
                    }
                    gl.data_mut()[*target] -= s;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g.item();
                    for x in ga.data_mut() {
                        *x += s;
                    }
                }
            }
            Op::SumSquares(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let s = 2.0 * g.item();
                    for (x, y) in ga.data_mut().iter_mut().zip(av.data()) {
                        *x += s * y;
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
