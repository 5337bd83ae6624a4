//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints for the nodes that depend on
//! a leaf created with [`Tape::leaf`].

use std::rc::Rc;

use crate::error::{domain, Result};
use crate::linalg::Mat3;

/// Dense 2-D array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(domain!("{} values do not fill a {rows}×{cols} tensor", data.len()));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn from_mat3(m: &Mat3) -> Self {
        let data = (0..9).map(|k| m[(k / 3, k % 3)]).collect();
        Tensor { rows: 3, cols: 3, data }
    }

    pub fn to_mat3(&self) -> Mat3 {
        assert_eq!((self.rows, self.cols), (3, 3), "not a 3×3 tensor");
        Mat3::from_row_slice(&self.data)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { rows: self.rows, cols: self.cols, data }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// `a · b`, optionally with either side transposed.
fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (n, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let m = if tb { b.rows } else { b.cols };
    let at = |i: usize, p: usize| if ta { a.data[p * a.cols + i] } else { a.data[i * a.cols + p] };
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let s = at(i, p);
            if s == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += s * b.data[j * b.cols + p];
                }
            } else {
                for (o, bv) in row.iter_mut().zip(&b.data[p * m..(p + 1) * m]) {
                    *o += s * bv;
                }
            }
        }
    }
    out
}

/// Sums the selected rows of `t` by recursive halving.
fn pairwise_rows(t: &Tensor, rows: &[usize], out: &mut [f64]) {
    match rows.len() {
        0 => out.iter_mut().for_each(|o| *o = 0.0),
        1 => out.copy_from_slice(t.row(rows[0])),
        n => {
            let mut right = vec![0.0; out.len()];
            pairwise_rows(t, &rows[..n / 2], out);
            pairwise_rows(t, &rows[n / 2..], &mut right);
            for (o, r) in out.iter_mut().zip(&right) {
                *o += r;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Grouping of rows into output segments; `groups[s]` lists the input rows of
/// segment `s` in the order they are summed.
#[derive(Debug, Clone)]
pub struct Segments {
    groups: Vec<Vec<usize>>,
    of_row: Vec<usize>,
}

impl Segments {
    pub fn new(of_row: Vec<usize>, n_segments: usize) -> Result<Self> {
        let mut groups = vec![Vec::new(); n_segments];
        for (r, &s) in of_row.iter().enumerate() {
            if s >= n_segments {
                return Err(domain!("segment {s} out of range {n_segments}"));
            }
            groups[s].push(r);
        }
        Ok(Segments { groups, of_row })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<Segments>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowNorm(Var),
    RowDot(Var, Var),
    Cross(Var, Var),
    Atan2(Var, Var),
    Rbf(Var, f64),
    OuterSum(Var, Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.data.len(), 1, "not a scalar");
        t.data[0]
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1], sb[0], "matmul {sa:?} · {sb:?}");
        let v = matmul(self.value(a), false, self.value(b), false);
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transposed();
        self.push(v, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1×m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sb, [1, sa[1]], "add_row {sa:?} + {sb:?}");
        let mut v = self.value(a).clone();
        let bv = &self.value(b).data;
        for row in v.data.chunks_mut(sa[1]) {
            for (x, y) in row.iter_mut().zip(bv) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    /// Scales row `i` of `a` by `c[i]` (`c` is `n×1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (sa, sc) = (self.shape(a), self.shape(c));
        assert_eq!(sc, [sa[0], 1], "mul_col {sa:?} * {sc:?}");
        let mut v = self.value(a).clone();
        let cv = &self.value(c).data;
        for (row, s) in v.data.chunks_mut(sa[1].max(1)).zip(cv) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        self.push(v, Op::MulCol(a, c), &[a, c])
    }

    /// `alpha·a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let v = self.value(a).map(|x| alpha * x + beta);
        self.push(v, Op::Affine(a, alpha), &[a])
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::recip);
        self.push(v, Op::Recip(a), &[a])
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Rows `idx[k]` of `a`, stacked.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let t = self.value(a);
        let mut v = Tensor::zeros(idx.len(), t.cols);
        for (k, &i) in idx.iter().enumerate() {
            v.data[k * t.cols..(k + 1) * t.cols].copy_from_slice(t.row(i));
        }
        self.push(v, Op::Gather(a, idx), &[a])
    }

    /// Row sums per segment, each accumulated pairwise in row order.
    pub fn segment_sum(&mut self, a: Var, seg: Rc<Segments>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, seg.of_row.len(), "segment_sum: row count");
        let mut v = Tensor::zeros(seg.len(), t.cols);
        for (s, rows) in seg.groups.iter().enumerate() {
            pairwise_rows(t, rows, &mut v.data[s * t.cols..(s + 1) * t.cols]);
        }
        self.push(v, Op::SegmentSum(a, seg), &[a])
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows, "slice_rows out of range");
        let v = Tensor { rows: len, cols: t.cols, data: t.data[start * t.cols..(start + len) * t.cols].to_vec() };
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let data = (0..t.rows).flat_map(|i| t.row(i)[start..start + len].iter().copied()).collect();
        let v = Tensor { rows: t.rows, cols: len, data };
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        assert!(parts.iter().all(|p| self.shape(*p)[0] == rows), "concat_cols: row count");
        let cols: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut v = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = i * cols;
            for p in parts {
                let r = self.value(*p).row(i);
                v.data[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0])[1];
        assert!(parts.iter().all(|p| self.shape(*p)[1] == cols), "concat_rows: column count");
        let data: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).data.iter().copied()).collect();
        let v = Tensor { rows: data.len() / cols.max(1), cols, data };
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::column((0..t.rows).map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect());
        self.push(v, Op::RowNorm(a), &[a])
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "row_dot");
        let (ta, tb) = (self.value(a), self.value(b));
        let v = Tensor::column((0..ta.rows).map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum()).collect());
        self.push(v, Op::RowDot(a, b), &[a, b])
    }

    /// Row-wise cross product of two `n×3` tensors.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "cross");
        assert_eq!(self.shape(a)[1], 3, "cross needs 3 columns");
        let v = cross_rows(self.value(a), self.value(b));
        self.push(v, Op::Cross(a, b), &[a, b])
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.same_shape(y, x, "atan2");
        let v = self.value(y).zip(self.value(x), f64::atan2);
        self.push(v, Op::Atan2(y, x), &[y, x])
    }

    /// Radial basis expansion of an `n×1` column:
    /// `out[i][k] = exp(-(d_i - kδ)² / δ)` for `k < bins`.
    pub fn rbf(&mut self, d: Var, delta: f64, bins: usize) -> Var {
        assert_eq!(self.shape(d)[1], 1, "rbf expects a column");
        let t = self.value(d);
        let mut v = Tensor::zeros(t.rows, bins);
        for (i, &di) in t.data.iter().enumerate() {
            for k in 0..bins {
                let c = di - k as f64 * delta;
                v.data[i * bins + k] = (-c * c / delta).exp();
            }
        }
        self.push(v, Op::Rbf(d, delta), &[d])
    }

    /// `Σ_i w_i · a_i b_iᵀ` for `n×3` tensors `a`, `b` and an `n×1` weight
    /// column, summed pairwise in row order. The result is `3×3`.
    pub fn outer_sum(&mut self, a: Var, b: Var, w: Var) -> Var {
        self.same_shape(a, b, "outer_sum");
        let n = self.shape(a)[0];
        assert_eq!(self.shape(a)[1], 3, "outer_sum needs 3 columns");
        assert_eq!(self.shape(w), [n, 1], "outer_sum weight shape");
        let (ta, tb, tw) = (self.value(a), self.value(b), self.value(w));
        let mut terms = Tensor::zeros(n, 9);
        for i in 0..n {
            let (ai, bi, wi) = (ta.row(i), tb.row(i), tw.data[i]);
            for p in 0..3 {
                for q in 0..3 {
                    terms.data[i * 9 + p * 3 + q] = wi * ai[p] * bi[q];
                }
            }
        }
        let rows: Vec<usize> = (0..n).collect();
        let mut v = Tensor::zeros(3, 3);
        pairwise_rows(&terms, &rows, &mut v.data);
        self.push(v, Op::OuterSum(a, b, w), &[a, b, w])
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).data.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, matmul(g, false, val(*b), true));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, matmul(val(*a), true, g, false));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transposed()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip(val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols.max(1)) {
                        for (s, x) in gb.data.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (val(*a), val(*c));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (row, s) in ga.data.chunks_mut(g.cols.max(1)).zip(&tc.data) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*c) {
                    let gc = (0..g.rows).map(|i| g.row(i).iter().zip(ta.row(i)).map(|(x, y)| x * y).sum()).collect();
                    self.accumulate(grads, *c, Tensor::column(gc));
                }
            }
            Op::Affine(a, alpha) => self.accumulate(grads, *a, g.map(|x| alpha * x)),
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, g.zip(&d, |x, y| x * y));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip(y, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip(y, |x, t| x * (1.0 - t * t))),
            Op::Abs(a) => {
                let sign = val(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, g.zip(&sign, |x, s| x * s));
            }
            Op::Square(a) => self.accumulate(grads, *a, g.zip(val(*a), |x, v| 2.0 * x * v)),
            Op::Recip(a) => self.accumulate(grads, *a, g.zip(y, |x, r| -x * r * r)),
            Op::Sum(a) => {
                let s = val(*a);
                self.accumulate(grads, *a, Tensor { rows: s.rows, cols: s.cols, data: vec![g.data[0]; s.data.len()] });
            }
            Op::Gather(a, idx) => {
                let s = val(*a);
                let mut ga = Tensor::zeros(s.rows, s.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in ga.data[i * s.cols..(i + 1) * s.cols].iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let mut ga = Tensor::zeros(seg.of_row.len(), g.cols);
                for (r, &s) in seg.of_row.iter().enumerate() {
                    ga.data[r * g.cols..(r + 1) * g.cols].copy_from_slice(g.row(s));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let s = val(*a);
                let mut ga = Tensor::zeros(s.rows, s.cols);
                ga.data[start * s.cols..start * s.cols + g.data.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let s = val(*a);
                let mut ga = Tensor::zeros(s.rows, s.cols);
                for i in 0..s.rows {
                    ga.data[i * s.cols + start..i * s.cols + start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.wants(*p) {
                        let mut gp = Tensor::zeros(g.rows, c);
                        for i in 0..g.rows {
                            gp.data[i * c..(i + 1) * c].copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let [r, c] = self.shape(*p);
                    if self.wants(*p) {
                        let gp = Tensor { rows: r, cols: c, data: g.data[off..off + r * c].to_vec() };
                        self.accumulate(grads, *p, gp);
                    }
                    off += r * c;
                }
            }
            Op::RowNorm(a) => {
                let mut ga = val(*a).clone();
                for (i, row) in ga.data.chunks_mut(ga.cols.max(1)).enumerate() {
                    let n = y.data[i];
                    let s = if n > 0.0 { g.data[i] / n } else { 0.0 };
                    row.iter_mut().for_each(|x| *x *= s);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                if self.wants(*a) {
                    let mut ga = val(*b).clone();
                    for (row, s) in ga.data.chunks_mut(ga.cols.max(1)).zip(&g.data) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = val(*a).clone();
                    for (row, s) in gb.data.chunks_mut(gb.cols.max(1)).zip(&g.data) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Cross(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, cross_rows(val(*b), g));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, cross_rows(g, val(*a)));
                }
            }
            Op::Atan2(yv, xv) => {
                let (ty, tx) = (val(*yv), val(*xv));
                let r2 = ty.zip(tx, |a, b| a * a + b * b);
                let inv = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
                if self.wants(*yv) {
                    let gy =
                        Tensor { rows: g.rows, cols: g.cols, data: (0..g.data.len()).map(|k| g.data[k] * inv(tx.data[k], r2.data[k])).collect() };
                    self.accumulate(grads, *yv, gy);
                }
                if self.wants(*xv) {
                    let gx =
                        Tensor { rows: g.rows, cols: g.cols, data: (0..g.data.len()).map(|k| -g.data[k] * inv(ty.data[k], r2.data[k])).collect() };
                    self.accumulate(grads, *xv, gx);
                }
            }
            Op::Rbf(d, delta) => {
                let td = val(*d);
                let bins = y.cols;
                let gd = (0..td.rows)
                    .map(|i| {
                        (0..bins)
                            .map(|k| {
                                let c = td.data[i] - k as f64 * delta;
                                g.data[i * bins + k] * y.data[i * bins + k] * (-2.0 * c / delta)
                            })
                            .sum()
                    })
                    .collect();
                self.accumulate(grads, *d, Tensor::column(gd));
            }
            Op::OuterSum(a, b, w) => {
                let (ta, tb, tw) = (val(*a), val(*b), val(*w));
                let gm = g.to_mat3();
                let n = ta.rows;
                let row3 = |t: &Tensor, i: usize| crate::linalg::Vec3::from_row_slice(t.row(i));
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(n, 3);
                    for i in 0..n {
                        let v = tw.data[i] * (gm * row3(tb, i));
                        ga.data[i * 3..i * 3 + 3].copy_from_slice(v.as_slice());
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(n, 3);
                    for i in 0..n {
                        let v = tw.data[i] * (gm.tr_mul(&row3(ta, i)));
                        gb.data[i * 3..i * 3 + 3].copy_from_slice(v.as_slice());
                    }
                    self.accumulate(grads, *b, gb);
                }
                if self.wants(*w) {
                    let gw = (0..n).map(|i| row3(ta, i).dot(&(gm * row3(tb, i)))).collect();
                    self.accumulate(grads, *w, Tensor::column(gw));
                }
            }
        }
    }
}

fn cross_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, 3);
    for i in 0..a.rows {
        let (x, y) = (a.row(i), b.row(i));
        out.data[i * 3] = x[1] * y[2] - x[2] * y[1];
        out.data[i * 3 + 1] = x[2] * y[0] - x[0] * y[2];
        out.data[i * 3 + 2] = x[0] * y[1] - x[1] * y[0];
    }
    out
}
