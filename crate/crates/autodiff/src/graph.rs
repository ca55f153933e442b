//! Wengert-style tape.
//!
//! Nodes are appended in creation order, which is already a topological order,
//! so the backward pass is a single reverse sweep from the loss node.

use crate::error::{AutodiffError, Result};
use crate::tensor::{topk_mask, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Pick {
        x: Var,
        entries: Vec<(usize, usize)>,
    },
    BlockDiag(Vec<Var>),
    BlockDiagMatMul {
        x: Var,
        blocks: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every operation of a forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn lanes(shape: [usize; 2], axis: usize) -> (usize, usize) {
    if axis == 0 {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

fn lane_index(shape: [usize; 2], axis: usize, lane: usize, i: usize) -> usize {
    if axis == 0 {
        i * shape[1] + lane
    } else {
        lane * shape[1] + i
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        Err(AutodiffError::Axis(axis))
    } else {
        Ok(())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies the value into a constant node, cutting the gradient path.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, v: Var, row: bool) -> Result<()> {
        let sa = self.shape(a);
        let sv = self.shape(v);
        let ok = if row {
            sv == [1, sa[1]]
        } else {
            sv == [sa[0], 1]
        };
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sv,
            })
        }
    }

    /// `a + row` with a `1×n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_check("add_row", a, row, true)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `a ∘ row` with a `1×n` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_check("mul_row", a, row, true)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    /// `a ∘ col` with an `m×1` column broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.broadcast_check("mul_col", a, col, false)?;
        let c = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, s) in c.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::EmptyAxis {
                op: "mean",
                shape: self.shape(a),
            });
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum along `axis`: 0 collapses rows (`1×n`), 1 collapses columns (`m×1`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let x = self.value(a);
        let [r, c] = x.shape();
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            Tensor::row_vector(out)
        } else {
            Tensor::column_vector((0..r).map(|i| x.row(i).iter().sum()).collect())
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let shape = self.shape(a);
        let n = if axis == 0 { shape[0] } else { shape[1] };
        if n == 0 {
            return Err(AutodiffError::EmptyAxis {
                op: "mean_axis",
                shape,
            });
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax along `axis`, stabilised by subtracting the lane maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax restricted to entries where `mask` is nonzero; masked entries
    /// come out as exact zeros and receive no gradient.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor, axis: usize) -> Result<Var> {
        if mask.shape() != self.shape(a) {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                left: self.shape(a),
                right: mask.shape(),
            });
        }
        self.softmax_impl(a, axis, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        check_axis(axis)?;
        let x = self.value(a);
        let shape = x.shape();
        let (n_lanes, lane_len) = lanes(shape, axis);
        if lane_len == 0 {
            return Err(AutodiffError::EmptyAxis {
                op: "softmax",
                shape,
            });
        }
        let keep = |idx: usize| mask.is_none_or(|m| m.data()[idx] != 0.0);
        let mut out = vec![0.0; x.len()];
        for lane in 0..n_lanes {
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                let idx = lane_index(shape, axis, lane, i);
                if keep(idx) {
                    max = max.max(x.data()[idx]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::EmptyAxis {
                    op: "masked_softmax",
                    shape,
                });
            }
            let mut total = 0.0;
            for i in 0..lane_len {
                let idx = lane_index(shape, axis, lane, i);
                if keep(idx) {
                    let e = (x.data()[idx] - max).exp();
                    out[idx] = e;
                    total += e;
                }
            }
            for i in 0..lane_len {
                out[lane_index(shape, axis, lane, i)] /= total;
            }
        }
        let value = Tensor::new(shape[0], shape[1], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { x: a, axis }, rg))
    }

    /// `x − logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let x = self.value(a);
        let shape = x.shape();
        let (n_lanes, lane_len) = lanes(shape, axis);
        if lane_len == 0 {
            return Err(AutodiffError::EmptyAxis {
                op: "log_softmax",
                shape,
            });
        }
        let mut out = vec![0.0; x.len()];
        for lane in 0..n_lanes {
            let max = (0..lane_len)
                .map(|i| x.data()[lane_index(shape, axis, lane, i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..lane_len)
                .map(|i| (x.data()[lane_index(shape, axis, lane, i)] - max).exp())
                .sum();
            let lse = max + total.ln();
            for i in 0..lane_len {
                let idx = lane_index(shape, axis, lane, i);
                out[idx] = x.data()[idx] - lse;
            }
        }
        let value = Tensor::new(shape[0], shape[1], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax { x: a, axis }, rg))
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                for v in value.row_mut(i) {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows { x: a, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::NoOperands { op: "concat_rows" })?;
        let cols = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::NoOperands { op: "concat_cols" })?;
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: s,
                });
            }
            cols += s[1];
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for i in 0..rows {
                value.row_mut(i)[offset..offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice(&mut self, a: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (row0, col0) = (rows.start, cols.start);
        let value = self.value(a).slice(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { x: a, row0, col0 }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, rows: std::ops::Range<usize>) -> Result<Var> {
        let c = self.shape(a)[1];
        self.slice(a, rows, 0..c)
    }

    /// Selects rows by index (repeats allowed); gradients are scattered back additively.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(index.len() * x.cols());
        for &i in index {
            if i >= x.rows() {
                return Err(AutodiffError::Index {
                    index: i,
                    len: x.rows(),
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(index.len(), x.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Collects the listed `(row, col)` entries into a `k×1` column.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let [r, c] = x.shape();
        let mut data = Vec::with_capacity(entries.len());
        for &(i, j) in entries {
            if i >= r || j >= c {
                return Err(AutodiffError::Index {
                    index: i.max(j),
                    len: r.min(c),
                });
            }
            data.push(x.get(i, j));
        }
        let value = Tensor::column_vector(data);
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Pick {
                x: a,
                entries: entries.to_vec(),
            },
            rg,
        ))
    }

    /// Places the operands along the diagonal of a zero matrix.
    pub fn block_diag(&mut self, blocks: &[Var]) -> Result<Var> {
        if blocks.is_empty() {
            return Err(AutodiffError::NoOperands { op: "block_diag" });
        }
        let (rows, cols) = blocks.iter().fold((0, 0), |(r, c), &b| {
            let s = self.shape(b);
            (r + s[0], c + s[1])
        });
        let mut value = Tensor::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for &b in blocks {
            let t = self.value(b);
            for i in 0..t.rows() {
                value.row_mut(r0 + i)[c0..c0 + t.cols()].copy_from_slice(t.row(i));
            }
            r0 += t.rows();
            c0 += t.cols();
        }
        let rg = blocks.iter().any(|&b| self.rg(b));
        Ok(self.push(value, Op::BlockDiag(blocks.to_vec()), rg))
    }

    /// `x · block_diag(blocks)` without materialising the block-diagonal matrix.
    pub fn block_diag_matmul(&mut self, x: Var, blocks: &[Var]) -> Result<Var> {
        if blocks.is_empty() {
            return Err(AutodiffError::NoOperands {
                op: "block_diag_matmul",
            });
        }
        let xs = self.shape(x);
        let (inner, outer) = blocks.iter().fold((0, 0), |(r, c), &b| {
            let s = self.shape(b);
            (r + s[0], c + s[1])
        });
        if inner != xs[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "block_diag_matmul",
                left: xs,
                right: [inner, outer],
            });
        }
        let xv = self.value(x);
        let mut value = Tensor::zeros(xs[0], outer);
        let (mut in0, mut out0) = (0, 0);
        for &b in blocks {
            let w = self.value(b);
            let [n_in, n_out] = w.shape();
            for i in 0..xs[0] {
                let xrow = &xv.row(i)[in0..in0 + n_in];
                let orow = &mut value.row_mut(i)[out0..out0 + n_out];
                for (p, &a) in xrow.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &wv) in orow.iter_mut().zip(w.row(p)) {
                        *o += a * wv;
                    }
                }
            }
            in0 += n_in;
            out0 += n_out;
        }
        let rg = self.rg(x) || blocks.iter().any(|&b| self.rg(b));
        Ok(self.push(
            value,
            Op::BlockDiagMatMul {
                x,
                blocks: blocks.to_vec(),
            },
            rg,
        ))
    }

    /// `x ∘ topk_mask(x)`: keeps the `k` largest entries per lane (ties to the
    /// lower index). The selection pattern itself is not differentiated.
    pub fn topk_select(&mut self, x: Var, k: usize, axis: usize) -> Result<Var> {
        let mask = topk_mask(self.value(x), k, axis)?;
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(AutodiffError::NotScalar(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(self.nodes.len(), None);
        // constants never report a gradient
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let gb = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, gb);
                }
                if self.rg(*b) {
                    let ga = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, v) in acc.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row_vector(acc));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.rg(*a) {
                    let mut t = g.clone();
                    for i in 0..t.rows() {
                        for (x, s) in t.row_mut(i).iter_mut().zip(r.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*row) {
                    let av = self.value(*a);
                    let mut acc = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for ((o, gv), xv) in acc.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row_vector(acc));
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                if self.rg(*a) {
                    let mut t = g.clone();
                    for (i, s) in c.data().iter().enumerate() {
                        for x in t.row_mut(i) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*col) {
                    let av = self.value(*a);
                    let acc = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::column_vector(acc));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let t = g.zip_map(self.value(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = g.zip_map(&node.value, "exp", |gv, y| gv * y)?;
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let t = g.zip_map(self.value(*a), "log", |gv, x| gv / x)?;
                self.accumulate(grads, *a, t);
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                let t = g.zip_map(self.value(*a), "clamp_min", |gv, x| if x > f { gv } else { 0.0 })?;
                self.accumulate(grads, *a, t);
            }
            Op::SumAll(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.data()[0]));
            }
            Op::SumAxis(a, axis) => {
                let [r, c] = self.shape(*a);
                let t = if *axis == 0 {
                    Tensor::from_fn(r, c, |_, j| g.data()[j])
                } else {
                    Tensor::from_fn(r, c, |i, _| g.data()[i])
                };
                self.accumulate(grads, *a, t);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let shape = y.shape();
                let (n_lanes, lane_len) = lanes(shape, *axis);
                let mut out = vec![0.0; y.len()];
                for lane in 0..n_lanes {
                    let dot: f64 = (0..lane_len)
                        .map(|i| {
                            let idx = lane_index(shape, *axis, lane, i);
                            g.data()[idx] * y.data()[idx]
                        })
                        .sum();
                    for i in 0..lane_len {
                        let idx = lane_index(shape, *axis, lane, i);
                        out[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape[0], shape[1], out)?);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let shape = y.shape();
                let (n_lanes, lane_len) = lanes(shape, *axis);
                let mut out = vec![0.0; y.len()];
                for lane in 0..n_lanes {
                    let gsum: f64 = (0..lane_len)
                        .map(|i| g.data()[lane_index(shape, *axis, lane, i)])
                        .sum();
                    for i in 0..lane_len {
                        let idx = lane_index(shape, *axis, lane, i);
                        out[idx] = g.data()[idx] - y.data()[idx].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape[0], shape[1], out)?);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in out.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if self.rg(p) {
                        let t = g.slice(r0..r0 + rows, 0..g.cols())?;
                        self.accumulate(grads, p, t);
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    if self.rg(p) {
                        let t = g.slice(0..g.rows(), c0..c0 + cols)?;
                        self.accumulate(grads, p, t);
                    }
                    c0 += cols;
                }
            }
            Op::Slice { x, row0, col0 } => {
                if self.rg(*x) {
                    let [r, c] = self.shape(*x);
                    let mut t = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        t.row_mut(row0 + i)[*col0..col0 + g.cols()].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, t);
                }
            }
            Op::GatherRows { x, index } => {
                if self.rg(*x) {
                    let [r, c] = self.shape(*x);
                    let mut t = Tensor::zeros(r, c);
                    for (k, &i) in index.iter().enumerate() {
                        for (o, v) in t.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Pick { x, entries } => {
                if self.rg(*x) {
                    let [r, c] = self.shape(*x);
                    let mut t = Tensor::zeros(r, c);
                    for (k, &(i, j)) in entries.iter().enumerate() {
                        let v = t.get(i, j) + g.data()[k];
                        t.set(i, j, v);
                    }
                    self.accumulate(grads, *x, t);
                }
            }
            Op::BlockDiag(blocks) => {
                let (mut r0, mut c0) = (0, 0);
                for &b in blocks {
                    let [r, c] = self.shape(b);
                    if self.rg(b) {
                        let t = g.slice(r0..r0 + r, c0..c0 + c)?;
                        self.accumulate(grads, b, t);
                    }
                    r0 += r;
                    c0 += c;
                }
            }
            Op::BlockDiagMatMul { x, blocks } => {
                let xv = self.value(*x);
                let rows = xv.rows();
                let mut gx = if self.rg(*x) {
                    Some(Tensor::zeros(rows, xv.cols()))
                } else {
                    None
                };
                let (mut in0, mut out0) = (0, 0);
                for &b in blocks {
                    let w = self.value(b);
                    let [n_in, n_out] = w.shape();
                    let g_blk = g.slice(0..rows, out0..out0 + n_out)?;
                    if let Some(gx) = gx.as_mut() {
                        let part = g_blk.matmul(&w.transpose())?;
                        for i in 0..rows {
                            gx.row_mut(i)[in0..in0 + n_in].copy_from_slice(part.row(i));
                        }
                    }
                    if self.rg(b) {
                        let x_blk = xv.slice(0..rows, in0..in0 + n_in)?;
                        let gw = x_blk.transpose().matmul(&g_blk)?;
                        self.accumulate(grads, b, gw);
                    }
                    in0 += n_in;
                    out0 += n_out;
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}
