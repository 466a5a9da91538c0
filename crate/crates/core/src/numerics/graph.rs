//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly when it is appended, so the forward pass
//! is the sequence of calls that built the graph. Nodes are stored in
//! creation order, which is already a topological order; [`Graph::backward`]
//! walks them once in reverse.

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::{NumericsError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SegmentMean(Var, Vec<Vec<usize>>),
    DepthwiseConv(Var, Var),
    StackFrames(Var),
    Pick(Var, Vec<usize>),
    /// Scalar produced outside the graph together with its gradient with
    /// respect to `input`.
    External(Var, Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient
    /// reached it (constants, nodes behind a stop-gradient, unused nodes).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-threaded tape of tensor primitives.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
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

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NumericsError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(a), rg))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize, NumericsError> {
        let (_, n) = self.matrix_dims(op, x)?;
        if self.shape(r) != [n] {
            return Err(mismatch(op, self.shape(x), self.shape(r)));
        }
        Ok(n)
    }

    /// `x[i, j] + b[j]` for a matrix `x` and a vector `b` (trailing-axis broadcast).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let n = self.row_broadcast_check("add_row", x, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bj) in row.iter_mut().zip(bv) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[i, j] · g[j]` for a matrix `x` and a vector `g`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var, NumericsError> {
        let n = self.row_broadcast_check("mul_row", x, g)?;
        let gv = self.value(g).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, gj) in row.iter_mut().zip(gv) {
                *o *= gj;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x · sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.matrix_dims("softmax_rows", x)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape());
        for (row, o) in src.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            softmax_row(row, o);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.matrix_dims("log_softmax_rows", x)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape());
        for (row, o) in src.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            log_softmax_row(row, o);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var, NumericsError> {
        let (_, n) = self.matrix_dims("layer_norm_rows", x)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape());
        for (row, o) in src.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            let (mean, inv_std) = row_stats(row, eps);
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - mean) * inv_std;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LayerNormRows(x, eps), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumericsError::Invalid {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("gather_rows", table)?;
        let src = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, c) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims("concat_rows", p)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start + len > c {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (r, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// One output row per segment: the arithmetic mean of the listed input rows.
    pub fn segment_mean(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("segment_mean", x)?;
        let src = self.value(x);
        let mut data = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(NumericsError::Invalid {
                    op: "segment_mean",
                    msg: format!("segment {s} is empty"),
                });
            }
            let out = &mut data[s * c..(s + 1) * c];
            for &i in seg {
                if i >= r {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "segment_mean",
                        index: i,
                        bound: r,
                    });
                }
                for (o, v) in out.iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
            let n = seg.len() as f64;
            for o in out.iter_mut() {
                *o /= n;
            }
        }
        let out = Tensor::matrix(segments.len(), c, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMean(x, segments.to_vec()), rg))
    }

    /// Per-channel convolution over time with "same" zero padding.
    ///
    /// `x` is `T × D`, `w` is `K × D` with odd `K`;
    /// `y[t, d] = Σ_j w[j, d] · x[t + j − K/2, d]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (t, d) = self.matrix_dims("depthwise_conv", x)?;
        let (k, wd) = self.matrix_dims("depthwise_conv", w)?;
        if wd != d || k % 2 == 0 {
            return Err(mismatch("depthwise_conv", self.shape(x), self.shape(w)));
        }
        let half = (k / 2) as isize;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; t * d];
        for ti in 0..t {
            let out = &mut data[ti * d..(ti + 1) * d];
            for j in 0..k {
                let src = ti as isize + j as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let xr = &xv[src * d..(src + 1) * d];
                let wr = &wv[j * d..(j + 1) * d];
                for ((o, xe), we) in out.iter_mut().zip(xr).zip(wr) {
                    *o += xe * we;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::matrix(t, d, data)?, Op::DepthwiseConv(x, w), rg))
    }

    /// Time reduction by stacking `k` consecutive frames into one row; the
    /// last group is zero padded. Output is `ceil(T / k) × (k·F)`.
    pub fn stack_frames(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        let (t, f) = self.matrix_dims("stack_frames", x)?;
        if k == 0 {
            return Err(NumericsError::Invalid {
                op: "stack_frames",
                msg: "reduction factor must be positive".into(),
            });
        }
        let out_t = t.div_ceil(k);
        let mut data = vec![0.0; out_t * k * f];
        let src = self.value(x).data();
        data[..t * f].copy_from_slice(src);
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(out_t, k * f, data)?, Op::StackFrames(x), rg))
    }

    /// `out[i] = x[i, indices[i]]`; returns a vector with one entry per row.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("pick", x)?;
        if indices.len() != r {
            return Err(mismatch("pick", self.shape(x), &[indices.len()]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r);
        for (i, &j) in indices.iter().enumerate() {
            if j >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    bound: c,
                });
            }
            data.push(src.get(i, j));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, indices.to_vec()), rg))
    }

    /// Registers a scalar computed outside the graph (for example by a
    /// dynamic-programming kernel) along with `d value / d input`.
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var, NumericsError> {
        if grad.shape() != self.shape(input) {
            return Err(mismatch("external_scalar", self.shape(input), grad.shape()));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::External(input, grad), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.rg(*a) {
                    let da = matmul_a_bt(gd, bv.data(), m, n, k);
                    acc(*a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.rg(*b) {
                    let db = matmul_at_b(av.data(), gd, m, k, n);
                    acc(*b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        data[j * n + i] = gd[i * m + j];
                    }
                }
                acc(*a, Tensor::matrix(m, n, data).expect("shape"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                acc(*b, neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let shape = g.shape().to_vec();
                if self.rg(*a) {
                    let da = gd.iter().zip(bv).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::new(shape.clone(), da).expect("shape"));
                }
                if self.rg(*b) {
                    let db = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    acc(*b, Tensor::new(shape, db).expect("shape"));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::vector(db));
                }
            }
            Op::MulRow(x, gain) => {
                let n = g.cols();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(n) {
                        for (d, w) in row.iter_mut().zip(gv) {
                            *d *= w;
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gain) {
                    let xv = self.value(*x).data();
                    let mut dg = vec![0.0; n];
                    for (grow, xrow) in gd.chunks(n).zip(xv.chunks(n)) {
                        for ((d, gg), xx) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gg * xx;
                        }
                    }
                    acc(*gain, Tensor::vector(dg));
                }
            }
            Op::Scale(x, c) => {
                let mut dx = g.clone();
                dx.scale_in_place(*c);
                acc(*x, dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let data = gd
                    .iter()
                    .zip(xv)
                    .map(|(gg, &v)| {
                        let s = sigmoid(v);
                        gg * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::SoftmaxRows(x) => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = Tensor::zeros(g.shape());
                for ((grow, yrow), drow) in gd.chunks(n).zip(y.chunks(n)).zip(dx.data_mut().chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yy * (gg - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = Tensor::zeros(g.shape());
                for ((grow, yrow), drow) in gd.chunks(n).zip(y.chunks(n)).zip(dx.data_mut().chunks_mut(n)) {
                    let total: f64 = grow.iter().sum();
                    for ((d, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = gg - yy.exp() * total;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNormRows(x, eps) => {
                let n = g.cols();
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(g.shape());
                for ((grow, xrow), drow) in gd.chunks(n).zip(xv.chunks(n)).zip(dx.data_mut().chunks_mut(n)) {
                    let (mean, inv_std) = row_stats(xrow, *eps);
                    let nf = n as f64;
                    let g_mean = grow.iter().sum::<f64>() / nf;
                    let gx_mean = grow
                        .iter()
                        .zip(xrow)
                        .map(|(gg, xx)| gg * (xx - mean) * inv_std)
                        .sum::<f64>()
                        / nf;
                    for ((d, gg), xx) in drow.iter_mut().zip(grow).zip(xrow) {
                        let xhat = (xx - mean) * inv_std;
                        *d = inv_std * (gg - g_mean - xhat * gx_mean);
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                acc(*x, Tensor::full(shape, gd[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                acc(*x, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::GatherRows(table, indices) => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in dt.row_mut(i).iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *d += v;
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let slice = gd[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    acc(p, Tensor::matrix(r, c, slice).expect("shape"));
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(r * w);
                    for i in 0..r {
                        data.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    acc(p, Tensor::matrix(r, w, data).expect("shape"));
                }
            }
            Op::SegmentMean(x, segments) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    let gs = &gd[s * c..(s + 1) * c];
                    for &i in seg {
                        for (d, v) in dx.row_mut(i).iter_mut().zip(gs) {
                            *d += v * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::DepthwiseConv(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (t, d) = (xv.rows(), xv.cols());
                let k = wv.rows();
                let half = (k / 2) as isize;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                for ti in 0..t {
                    let gr = &gd[ti * d..(ti + 1) * d];
                    for j in 0..k {
                        let src = ti as isize + j as isize - half;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dx.data_mut()[src * d + c] += gr[c] * wv.data()[j * d + c];
                            dw.data_mut()[j * d + c] += gr[c] * xv.data()[src * d + c];
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::StackFrames(x) => {
                let xv = self.value(*x);
                let n = xv.len();
                let dx = Tensor::new(xv.shape().to_vec(), gd[..n].to_vec()).expect("shape");
                acc(*x, dx);
            }
            Op::Pick(x, indices) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (i, &j) in indices.iter().enumerate() {
                    dx.data_mut()[i * c + j] += gd[i];
                }
                acc(*x, dx);
            }
            Op::External(x, local) => {
                let mut dx = local.clone();
                dx.scale_in_place(gd[0]);
                acc(*x, dx);
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
