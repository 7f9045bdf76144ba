//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a 1×1 output walks the record in reverse and returns
//! the gradient with respect to every node that depends on a parameter leaf.
//! Parameters are borrowed, not copied, so a tape lives no longer than the
//! parameter store it reads from.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use super::matrix::{gemm_into, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-10;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, s: f64 },
    Gelu { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Transpose { a: Var },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    SparseNll { a: Var, entries: Vec<(usize, usize, f64)> },
    Sum { a: Var },
    MaxRows { a: Var, argmax: Vec<usize> },
    RowNormalize { a: Var, norms: Vec<f64> },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Softplus { a: Var },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: RefCell<Vec<Node<'p>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn slot_zeroed<'a>(slot: &'a mut Option<Matrix>, rows: usize, cols: usize) -> &'a mut Matrix {
    slot.get_or_insert_with(|| Matrix::zeros(rows, cols))
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
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

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Cow<'p, Matrix>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A trainable leaf borrowing its value.
    pub fn param(&self, value: &'p Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A non-trainable leaf.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Standardized (pre-scale/shift) outputs of every layer normalization
    /// recorded so far, in recording order.
    pub fn normalized_outputs(&self) -> Vec<Matrix> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match &n.op {
                Op::LayerNorm { xhat, .. } => Some(xhat.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            Matrix::matmul_t(&va, ta, &vb, tb)
        };
        let ng = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let mut v = self.value(a).clone();
            v.add_assign(&self.value(b));
            v
        };
        let ng = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::Add { a, b }, ng)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let mut v = self.value(a).clone();
            let r = self.value(row);
            assert_eq!(r.shape(), (1, v.cols()), "broadcast row has wrong shape");
            for i in 0..v.rows() {
                for (x, b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                    *x += b;
                }
            }
            v
        };
        let ng = self.needs(&[a, row]);
        self.push(Cow::Owned(value), Op::AddRow { a, row }, ng)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Scale { a, s }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Gelu { a }, ng)
    }

    /// Row-wise layer normalization with 1×n scale and shift.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, inv_std) = {
            let x = self.value(a);
            let g = self.value(gamma);
            let b = self.value(beta);
            let (rows, cols) = x.shape();
            let mut xhat = Matrix::zeros(rows, cols);
            let mut out = Matrix::zeros(rows, cols);
            let mut inv_std = Vec::with_capacity(rows);
            for i in 0..rows {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(inv);
                for j in 0..cols {
                    let h = (row[j] - mean) * inv;
                    xhat.set(i, j, h);
                    out.set(i, j, h * g.get(0, j) + b.get(0, j));
                }
            }
            (out, xhat, inv_std)
        };
        let ng = self.needs(&[a, gamma, beta]);
        self.push(
            Cow::Owned(value),
            Op::LayerNorm { a, gamma, beta, xhat, inv_std },
            ng,
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let mut v = self.value(a).clone();
            for i in 0..v.rows() {
                let row = v.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
            v
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::SoftmaxRows { a }, ng)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = {
            let mut v = self.value(a).clone();
            for i in 0..v.rows() {
                let row = v.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            v
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::LogSoftmaxRows { a }, ng)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let x = self.value(a);
            assert!(start + len <= x.cols(), "column slice out of range");
            let mut out = Matrix::zeros(x.rows(), len);
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Matrix>> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals[0].rows();
            let cols: usize = vals.iter().map(|m| m.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let mut offset = 0;
                for m in &vals {
                    assert_eq!(m.rows(), rows, "row count mismatch in concat");
                    out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
                    offset += m.cols();
                }
            }
            out
        };
        let ng = self.needs(parts);
        self.push(Cow::Owned(value), Op::ConcatCols { parts: parts.to_vec() }, ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Transpose { a }, ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Var {
        let value = {
            let t = self.value(table);
            let mut out = Matrix::zeros(ids.len(), t.cols());
            for (i, &id) in ids.iter().enumerate() {
                out.row_mut(i).copy_from_slice(t.row(id));
            }
            out
        };
        let ng = self.needs(&[table]);
        self.push(Cow::Owned(value), Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Elementwise multiplication by a fixed mask (inverted dropout).
    pub fn dropout_mask(&self, a: Var, mask: Vec<f64>) -> Var {
        let value = {
            let mut v = self.value(a).clone();
            assert_eq!(v.len(), mask.len(), "dropout mask has wrong size");
            for (x, m) in v.as_mut_slice().iter_mut().zip(&mask) {
                *x *= m;
            }
            v
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Dropout { a, mask }, ng)
    }

    /// `-Σ w · a[r, c]` over the given `(r, c, w)` entries, as a 1×1 value.
    pub fn sparse_nll(&self, a: Var, entries: Vec<(usize, usize, f64)>) -> Var {
        let value = {
            let x = self.value(a);
            let total: f64 = entries.iter().map(|&(r, c, w)| -w * x.get(r, c)).sum();
            Matrix::from_vec(1, 1, vec![total])
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::SparseNll { a, entries }, ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Sum { a }, ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row maxima as a column; ties resolve to the lowest column.
    pub fn max_rows(&self, a: Var) -> Var {
        let (value, argmax) = {
            let x = self.value(a);
            let mut out = Matrix::zeros(x.rows(), 1);
            let mut argmax = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let row = x.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                argmax.push(best);
                out.set(i, 0, row[best]);
            }
            (out, argmax)
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::MaxRows { a, argmax }, ng)
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero.
    pub fn row_normalize(&self, a: Var) -> Var {
        let (value, norms) = {
            let mut v = self.value(a).clone();
            let mut norms = Vec::with_capacity(v.rows());
            for i in 0..v.rows() {
                let row = v.row_mut(i);
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                norms.push(n);
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
            (v, norms)
        };
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::RowNormalize { a, norms }, ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let x = self.value(a);
            let y = self.value(b);
            assert_eq!(x.shape(), y.shape(), "shape mismatch in mul");
            let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).collect();
            Matrix::from_vec(x.rows(), x.cols(), data)
        };
        let ng = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::Mul { a, b }, ng)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let value = {
            let x = self.value(a);
            let y = self.value(b);
            assert_eq!(x.shape(), y.shape(), "shape mismatch in div");
            let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p / q).collect();
            Matrix::from_vec(x.rows(), x.cols(), data)
        };
        let ng = self.needs(&[a, b]);
        self.push(Cow::Owned(value), Op::Div { a, b }, ng)
    }

    pub fn softplus(&self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(value), Op::Softplus { a }, ng)
    }

    /// Gradients of the 1×1 node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let need = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| -> &Matrix { nodes[v.0].value.as_ref() };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                &Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (val(a), val(b));
                    if need(a) {
                        let slot = slot_zeroed(&mut grads[a.0], va.rows(), va.cols());
                        if ta {
                            gemm_into(vb, tb, &dy, true, slot, 1.0);
                        } else {
                            gemm_into(&dy, false, vb, !tb, slot, 1.0);
                        }
                    }
                    if need(b) {
                        let slot = slot_zeroed(&mut grads[b.0], vb.rows(), vb.cols());
                        if tb {
                            gemm_into(&dy, true, va, ta, slot, 1.0);
                        } else {
                            gemm_into(va, !ta, &dy, false, slot, 1.0);
                        }
                    }
                }
                &Op::Add { a, b } => {
                    if need(a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if need(b) {
                        accumulate(&mut grads[b.0], dy.clone());
                    }
                }
                &Op::AddRow { a, row } => {
                    if need(row) {
                        let mut g = Matrix::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            for (s, d) in g.as_mut_slice().iter_mut().zip(dy.row(i)) {
                                *s += d;
                            }
                        }
                        accumulate(&mut grads[row.0], g);
                    }
                    if need(a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                }
                &Op::Scale { a, s } => {
                    if need(a) {
                        accumulate(&mut grads[a.0], dy.map(|g| g * s));
                    }
                }
                &Op::Gelu { a } => {
                    if need(a) {
                        let x = val(a);
                        let data = dy
                            .as_slice()
                            .iter()
                            .zip(x.as_slice())
                            .map(|(g, &x)| g * gelu_grad(x))
                            .collect();
                        accumulate(&mut grads[a.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                }
                Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                    let (a, gamma, beta) = (*a, *gamma, *beta);
                    let g = val(gamma);
                    let (rows, cols) = dy.shape();
                    if need(gamma) {
                        let mut dg = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                dg.as_mut_slice()[j] += dy.get(i, j) * xhat.get(i, j);
                            }
                        }
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if need(beta) {
                        let mut db = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for (s, d) in db.as_mut_slice().iter_mut().zip(dy.row(i)) {
                                *s += d;
                            }
                        }
                        accumulate(&mut grads[beta.0], db);
                    }
                    if need(a) {
                        let n = cols as f64;
                        let mut dx = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            let dxhat: Vec<f64> =
                                (0..cols).map(|j| dy.get(i, j) * g.get(0, j)).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 =
                                dxhat.iter().enumerate().map(|(j, d)| d * xhat.get(i, j)).sum();
                            for j in 0..cols {
                                let v = inv_std[i] / n
                                    * (n * dxhat[j] - sum_d - xhat.get(i, j) * sum_dx);
                                dx.set(i, j, v);
                            }
                        }
                        accumulate(&mut grads[a.0], dx);
                    }
                }
                &Op::SoftmaxRows { a } => {
                    if need(a) {
                        let y = node.value.as_ref();
                        let mut dx = Matrix::zeros(y.rows(), y.cols());
                        for i in 0..y.rows() {
                            let s: f64 = y.row(i).iter().zip(dy.row(i)).map(|(p, g)| p * g).sum();
                            for j in 0..y.cols() {
                                dx.set(i, j, y.get(i, j) * (dy.get(i, j) - s));
                            }
                        }
                        accumulate(&mut grads[a.0], dx);
                    }
                }
                &Op::LogSoftmaxRows { a } => {
                    if need(a) {
                        let y = node.value.as_ref();
                        let mut dx = Matrix::zeros(y.rows(), y.cols());
                        for i in 0..y.rows() {
                            let s: f64 = dy.row(i).iter().sum();
                            for j in 0..y.cols() {
                                dx.set(i, j, dy.get(i, j) - y.get(i, j).exp() * s);
                            }
                        }
                        accumulate(&mut grads[a.0], dx);
                    }
                }
                &Op::SliceRows { a, start } => {
                    if need(a) {
                        let x = val(a);
                        let slot = slot_zeroed(&mut grads[a.0], x.rows(), x.cols());
                        for i in 0..dy.rows() {
                            for (s, d) in slot.row_mut(start + i).iter_mut().zip(dy.row(i)) {
                                *s += d;
                            }
                        }
                    }
                }
                &Op::SliceCols { a, start } => {
                    if need(a) {
                        let x = val(a);
                        let slot = slot_zeroed(&mut grads[a.0], x.rows(), x.cols());
                        for i in 0..dy.rows() {
                            let row = &mut slot.row_mut(i)[start..start + dy.cols()];
                            for (s, d) in row.iter_mut().zip(dy.row(i)) {
                                *s += d;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = val(p).cols();
                        if need(p) {
                            let mut g = Matrix::zeros(dy.rows(), pc);
                            for i in 0..dy.rows() {
                                g.row_mut(i).copy_from_slice(&dy.row(i)[offset..offset + pc]);
                            }
                            accumulate(&mut grads[p.0], g);
                        }
                        offset += pc;
                    }
                }
                &Op::Transpose { a } => {
                    if need(a) {
                        accumulate(&mut grads[a.0], dy.transpose());
                    }
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    if need(table) {
                        let t = val(table);
                        let slot = slot_zeroed(&mut grads[table.0], t.rows(), t.cols());
                        for (i, &id) in ids.iter().enumerate() {
                            for (s, d) in slot.row_mut(id).iter_mut().zip(dy.row(i)) {
                                *s += d;
                            }
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    if need(a) {
                        let data =
                            dy.as_slice().iter().zip(mask).map(|(g, m)| g * m).collect();
                        accumulate(&mut grads[a.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                }
                Op::SparseNll { a, entries } => {
                    let a = *a;
                    if need(a) {
                        let x = val(a);
                        let g = dy.get(0, 0);
                        let slot = slot_zeroed(&mut grads[a.0], x.rows(), x.cols());
                        for &(r, c, w) in entries {
                            let cur = slot.get(r, c);
                            slot.set(r, c, cur - w * g);
                        }
                    }
                }
                &Op::Sum { a } => {
                    if need(a) {
                        let x = val(a);
                        accumulate(&mut grads[a.0], Matrix::filled(x.rows(), x.cols(), dy.get(0, 0)));
                    }
                }
                Op::MaxRows { a, argmax } => {
                    let a = *a;
                    if need(a) {
                        let x = val(a);
                        let slot = slot_zeroed(&mut grads[a.0], x.rows(), x.cols());
                        for (i, &j) in argmax.iter().enumerate() {
                            let cur = slot.get(i, j);
                            slot.set(i, j, cur + dy.get(i, 0));
                        }
                    }
                }
                Op::RowNormalize { a, norms } => {
                    let a = *a;
                    if need(a) {
                        let y = node.value.as_ref();
                        let mut dx = Matrix::zeros(y.rows(), y.cols());
                        for i in 0..y.rows() {
                            if norms[i] == 0.0 {
                                continue;
                            }
                            let proj: f64 = y.row(i).iter().zip(dy.row(i)).map(|(p, g)| p * g).sum();
                            for j in 0..y.cols() {
                                dx.set(i, j, (dy.get(i, j) - y.get(i, j) * proj) / norms[i]);
                            }
                        }
                        accumulate(&mut grads[a.0], dx);
                    }
                }
                &Op::Mul { a, b } => {
                    let (x, y) = (val(a), val(b));
                    if need(a) {
                        let data = dy.as_slice().iter().zip(y.as_slice()).map(|(g, q)| g * q).collect();
                        accumulate(&mut grads[a.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                    if need(b) {
                        let data = dy.as_slice().iter().zip(x.as_slice()).map(|(g, p)| g * p).collect();
                        accumulate(&mut grads[b.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                }
                &Op::Div { a, b } => {
                    let (x, y) = (val(a), val(b));
                    if need(a) {
                        let data = dy.as_slice().iter().zip(y.as_slice()).map(|(g, q)| g / q).collect();
                        accumulate(&mut grads[a.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                    if need(b) {
                        let data = dy
                            .as_slice()
                            .iter()
                            .zip(x.as_slice().iter().zip(y.as_slice()))
                            .map(|(g, (p, q))| -g * p / (q * q))
                            .collect();
                        accumulate(&mut grads[b.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                }
                &Op::Softplus { a } => {
                    if need(a) {
                        let x = val(a);
                        let data = dy
                            .as_slice()
                            .iter()
                            .zip(x.as_slice())
                            .map(|(g, &x)| g * sigmoid(x))
                            .collect();
                        accumulate(&mut grads[a.0], Matrix::from_vec(dy.rows(), dy.cols(), data));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a one-input graph.
    fn check_unary(build: impl Fn(&Tape, Var) -> Var, input: Matrix) {
        let tape = Tape::new();
        let x = tape.param(&input);
        let out = build(&tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        let eps = 1e-6;
        for k in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.as_mut_slice()[k] += delta;
                let t = Tape::new();
                let v = t.param(&p);
                let o = build(&t, v);
                t.scalar(o)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.as_slice()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!((a - numeric).abs() / denom < 1e-6, "entry {k}: analytic {a} vs numeric {numeric}");
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_ops_have_correct_gradients() {
        let w = rand_matrix(3, 4, 9);
        check_unary(|t, x| {
            let g = t.gelu(x);
            let s = t.softplus(g);
            let c = t.constant(w.clone());
            let m = t.mul(s, c);
            t.sum(m)
        }, rand_matrix(3, 4, 1));
    }

    #[test]
    fn layer_norm_and_softmax_gradients() {
        let w = rand_matrix(3, 5, 4);
        let gamma = rand_matrix(1, 5, 5);
        let beta = rand_matrix(1, 5, 6);
        check_unary(|t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let n = t.layer_norm(x, g, b);
            let s = t.softmax_rows(n);
            let c = t.constant(w.clone());
            let m = t.mul(s, c);
            t.sum(m)
        }, rand_matrix(3, 5, 2));
    }

    #[test]
    fn matmul_transpose_slice_concat_gradients() {
        let other = rand_matrix(4, 3, 7);
        check_unary(|t, x| {
            let o = t.constant(other.clone());
            // x: 3x2, so x^T · o^T is 2x4
            let p = t.matmul_t(x, true, o, true);
            let row = t.slice_rows(p, 1, 1);
            let col = t.slice_cols(p, 0, 1);
            let tr = t.transpose(col);
            let cat = t.concat_cols(&[row, tr]);
            let ls = t.log_softmax_rows(cat);
            t.sparse_nll(ls, vec![(0, 0, 0.3), (0, 5, 0.7)])
        }, rand_matrix(3, 2, 3));
    }

    #[test]
    fn cosine_max_and_ratio_gradients() {
        let other = rand_matrix(5, 4, 11);
        check_unary(|t, x| {
            let n = t.row_normalize(x);
            let o = t.constant(other.clone());
            let on = t.row_normalize(o);
            let sims = t.matmul_t(n, false, on, true);
            let m = t.max_rows(sims);
            let a = t.mean(m);
            let sq = t.mul(a, a);
            let denom = t.add(a, a);
            let half = t.div(sq, denom);
            t.softplus(half)
        }, rand_matrix(3, 4, 12));
    }

    #[test]
    fn gather_and_add_row_accumulate() {
        let bias = rand_matrix(1, 3, 21);
        check_unary(|t, x| {
            let g = t.gather(x, &[0, 2, 0, 1]);
            let b = t.constant(bias.clone());
            let y = t.add_row(g, b);
            let sq = t.mul(y, y);
            let d = t.dropout_mask(sq, vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0]);
            t.sum(d)
        }, rand_matrix(3, 3, 20));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Matrix::filled(2, 2, 1.0));
        let s = tape.sum(c);
        let grads = tape.backward(s);
        assert!(grads.get(c).is_none());
    }
}
