//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] with one or more seed gradients walks the record in
//! reverse and returns a gradient for every node that depends on a trainable
//! leaf. Parameters are pulled lazily from a [`ParamStore`] by canonical path,
//! so one graph corresponds to one forward pass of (part of) a model.
//!
//! All tensors are 2-D. Vectors are `1 x n` rows and scalars are `1 x 1`.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a * b^T
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    MeanRows { x: Var, rows: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    GroupMax { x: Var, argmax: Vec<usize> },
    RowDot(Var, Var),
    Reshape(Var),
    GroupWeightedSum { w: Var, v: Var },
    BroadcastRows(Var),
    DiagCrossEntropy { x: Var, probs: Mat },
    SumSquares { x: Var, rows: Vec<usize> },
    ZeroRows { x: Var, rows: Vec<usize> },
    SumAll(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path exists.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros((rows, cols)))
    }
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter store; use [`Graph::leaf`] for trainable inputs.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input that is not part of the parameter store.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf looked up by canonical path. Repeated lookups share one node.
    ///
    /// Panics if the path is absent; model constructors validate the store.
    pub fn param(&mut self, path: &str) -> Var {
        if let Some(&v) = self.params.get(path) {
            return v;
        }
        let store = self
            .store
            .expect("graph has no parameter store attached");
        let value = store
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter `{path}`"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(path.to_string(), v);
        v
    }

    /// Stop-gradient: forwards the value, blocks every backward path through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = mm(self.value(a).view(), self.value(b).view());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = mm(self.value(a).view(), self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let value = self.value(a) * self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let m = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / m;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::Normalize { x: a, inv_std }, rg)
    }

    /// Row-wise softmax. Columns whose `key_mask` entry is `false` get zero
    /// probability. A row with no valid column is all zeros.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), x.ncols(), "key mask length mismatch");
        }
        let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = Mat::zeros(x.dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| valid(j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    out[[i, j]] = e;
                    total += e;
                }
            }
            out.row_mut(i).mapv_inplace(|e| e / total);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Mean over the listed rows, producing a `1 x m` row.
    pub fn mean_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        assert!(!rows.is_empty(), "mean over zero rows");
        let x = self.value(a);
        let mut out = Mat::zeros((1, x.ncols()));
        for &r in &rows {
            out.row_mut(0).scaled_add(1.0, &x.row(r));
        }
        out /= rows.len() as f64;
        let rg = self.rg(a);
        self.push(out, Op::MeanRows { x: a, rows }, rg)
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(out, Op::L2Normalize { x: a, norms }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { x: a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let value = x.select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows { x: a, idx }, rg)
    }

    /// Max over consecutive groups of `group` rows: `(g*group) x m -> g x m`.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        assert!(group > 0 && n % group == 0, "group_max: {n} rows not divisible by {group}");
        let g = n / group;
        let mut out = Mat::zeros((g, m));
        let mut argmax = vec![0usize; g * m];
        for r in 0..g {
            for c in 0..m {
                let mut best = r * group;
                for src in r * group + 1..(r + 1) * group {
                    if x[[src, c]] > x[[best, c]] {
                        best = src;
                    }
                }
                out[[r, c]] = x[[best, c]];
                argmax[r * m + c] = best;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMax { x: a, argmax }, rg)
    }

    /// Row-wise dot products: `n x m, n x m -> n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let value = (x * y).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot(a, b), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// `out[i] = sum_j w[i, j] * v[i * k + j]` with `w: n x k`, `v: (n*k) x m`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Var {
        let (wv, vv) = (self.value(w), self.value(v));
        let (n, k) = wv.dim();
        assert_eq!(vv.nrows(), n * k, "group_weighted_sum: row count mismatch");
        let mut out = Mat::zeros((n, vv.ncols()));
        for i in 0..n {
            let mut row = out.row_mut(i);
            for j in 0..k {
                row.scaled_add(wv[[i, j]], &vv.row(i * k + j));
            }
        }
        let rg = self.rg(w) || self.rg(v);
        self.push(out, Op::GroupWeightedSum { w, v }, rg)
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1);
        let value = x.broadcast((n, x.ncols())).unwrap().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::BroadcastRows(a), rg)
    }

    /// `-(1/n) sum_i log softmax(x[i, :])[i]` for a square logit matrix.
    pub fn diag_cross_entropy(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows();
        assert_eq!(n, x.ncols(), "diag_cross_entropy needs a square matrix");
        let mut probs = Mat::zeros((n, n));
        let mut loss = 0.0;
        for i in 0..n {
            let row = x.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let total: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[i];
            for j in 0..n {
                probs[[i, j]] = (row[j] - lse).exp();
            }
        }
        let value = Mat::from_elem((1, 1), loss / n as f64);
        let rg = self.rg(a);
        self.push(value, Op::DiagCrossEntropy { x: a, probs }, rg)
    }

    /// Sum of squared entries over the listed rows, as a `1 x 1` scalar.
    pub fn sum_squares_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let x = self.value(a);
        let total: f64 = rows
            .iter()
            .map(|&r| x.row(r).iter().map(|v| v * v).sum::<f64>())
            .sum();
        let rg = self.rg(a);
        self.push(Mat::from_elem((1, 1), total), Op::SumSquares { x: a, rows }, rg)
    }

    /// Copy of `a` with the listed rows replaced by zeros.
    pub fn zero_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let mut value = self.value(a).clone();
        for &r in &rows {
            value.row_mut(r).fill(0.0);
        }
        let rg = self.rg(a);
        self.push(value, Op::ZeroRows { x: a, rows }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Canonical path to node for every parameter pulled into this graph.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Parameter gradients from a backward pass. Parameters without a path
    /// to any seed are omitted.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter_map(|(path, &v)| grads.get(v).map(|g| (path.clone(), g.clone())))
            .collect()
    }

    /// Reverse pass. Each seed is `(node, d objective / d node)`.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape mismatch");
            self.accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, mm(g.view(), self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, mm(self.value(*a).t(), g.view()));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, mm(g.view(), self.value(*b).view()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, mm(g.t(), self.value(*a).view()));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.rg(*row) {
                    let d = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, d);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::MulScalar(a, s) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.scalar(*s));
                }
                if self.rg(*s) {
                    let d = (g * self.value(*a)).sum();
                    self.accumulate(grads, *s, Mat::from_elem((1, 1), d));
                }
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    });
                self.accumulate(grads, *a, d);
            }
            Op::Normalize { x, inv_std } => {
                let xhat = &node.value;
                let m = xhat.ncols() as f64;
                let mut d = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let sum_g = gr.sum();
                    let sum_gh = gr.dot(&hr);
                    let k = inv_std[r] / m;
                    for c in 0..xhat.ncols() {
                        d[[r, c]] = k * (m * gr[c] - sum_g - hr[c] * sum_gh);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut d = g * p;
                for r in 0..p.nrows() {
                    let dot = d.row(r).sum();
                    for c in 0..p.ncols() {
                        d[[r, c]] -= p[[r, c]] * dot;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanRows { x, rows } => {
                let mut d = Mat::zeros(self.shape(*x));
                let scale = 1.0 / rows.len() as f64;
                for &r in rows {
                    d.row_mut(r).scaled_add(scale, &g.row(0));
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.nrows() {
                    let dot = y.row(r).dot(&g.row(r));
                    let mut row = d.row_mut(r);
                    row.scaled_add(-dot, &y.row(r));
                    row.mapv_inplace(|v| v / norms[r]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let mut d = Mat::zeros(self.shape(*x));
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows { x, idx } => {
                let mut d = Mat::zeros(self.shape(*x));
                for (r, &src) in idx.iter().enumerate() {
                    d.row_mut(src).scaled_add(1.0, &g.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::GroupMax { x, argmax } => {
                let mut d = Mat::zeros(self.shape(*x));
                let m = g.ncols();
                for r in 0..g.nrows() {
                    for c in 0..m {
                        d[[argmax[r * m + c], c]] += g[[r, c]];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowDot(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.value(*b) * g);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a) * g);
                }
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let d = Mat::from_shape_vec(self.shape(*a), flat).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::GroupWeightedSum { w, v } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let (n, k) = wv.dim();
                if self.rg(*w) {
                    let mut dw = Mat::zeros((n, k));
                    for i in 0..n {
                        for j in 0..k {
                            dw[[i, j]] = g.row(i).dot(&vv.row(i * k + j));
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*v) {
                    let mut dv = Mat::zeros(vv.dim());
                    for i in 0..n {
                        for j in 0..k {
                            dv.row_mut(i * k + j).scaled_add(wv[[i, j]], &g.row(i));
                        }
                    }
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::BroadcastRows(a) => {
                self.accumulate(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::DiagCrossEntropy { x, probs } => {
                let n = probs.nrows();
                let mut d = probs.clone();
                for i in 0..n {
                    d[[i, i]] -= 1.0;
                }
                d *= g[[0, 0]] / n as f64;
                self.accumulate(grads, *x, d);
            }
            Op::SumSquares { x, rows } => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.dim());
                let c = 2.0 * g[[0, 0]];
                for &r in rows {
                    d.row_mut(r).scaled_add(c, &xv.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ZeroRows { x, rows } => {
                let mut d = g.clone();
                for &r in rows {
                    d.row_mut(r).fill(0.0);
                }
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(a) => {
                let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
        }
    }
}

/// Matrix product; tiny operands use a direct loop instead of the packed kernel.
fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let (n, k) = a.dim();
    let m = b.ncols();
    if k == 0 || m == 0 || n * k * m > 1 << 14 {
        return a.dot(&b);
    }
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; n * m];
    for (orow, arow) in out.chunks_exact_mut(m).zip(a.chunks_exact(k)) {
        for (&x, brow) in arow.iter().zip(b.chunks_exact(m)) {
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Mat::from_shape_vec((n, m), out).unwrap()
}
