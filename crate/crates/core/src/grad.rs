//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] in creation order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it once in reverse.
//!
//! Tensors are at most rank 2. A rank-1 tensor of length `n` behaves as a
//! `1 x n` row wherever a matrix is expected, and a rank-0 tensor is a scalar.
//!
//! ```
//! use mixce::grad::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
//! let y = tape.relu(x).unwrap();
//! let s = tape.sum(y).unwrap();
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[0.0, 1.0]);
//! ```

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("log of negative value {0}")]
    LogOfNegative(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.len() > 2 || expected != data.len() {
            return Err(GradError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    StopGradient,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    Log(usize, f64),
    Exp(usize),
    LogAddExp(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    IndexRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    Dropout(usize, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::StopGradient => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::Add(..) | Op::AddRow(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::LogAddExp(..) => "log_add_exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::IndexRows(..) => "index_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Pick(..) => "pick",
            Op::Dropout(..) => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward pass. Not shareable across threads;
/// independent tapes have no shared state.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    branches: DefaultHasher,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            branches: DefaultHasher::new(),
        }
    }

    /// A tape that rejects NaN or infinite values at node creation.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
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
        self.nodes[v.0].value.item()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `a`, but contributes no gradient to it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fingerprint of every discrete decision taken while recording: ReLU
    /// activation patterns plus anything passed to [`Tape::record_branch`].
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    pub fn record_branch(&mut self, decisions: &[bool]) {
        decisions.hash(&mut self.branches);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(GradError::NonFinite(op.name()));
        }
        let tracked = inputs(&op).iter().any(|&i| self.nodes[i].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() || x.shape().is_empty() || y.shape().is_empty() {
            return Err(mismatch("matmul", x, y));
        }
        let out = matmul_nn(x, y);
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// Elementwise sum. `b` may also be a single row (rank 1 or `1 x n`)
    /// broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            let mut out = x.clone();
            out.add_assign(y);
            return self.push(out, Op::Add(a.0, b.0));
        }
        if y.rows() == 1 && y.shape().len() >= 1 && y.cols() == x.cols() && x.shape().len() == 2
        {
            let mut out = x.clone();
            let c = x.cols();
            for row in out.data.chunks_mut(c) {
                for (o, b) in row.iter_mut().zip(&y.data) {
                    *o += b;
                }
            }
            return self.push(out, Op::AddRow(a.0, b.0));
        }
        Err(mismatch("add", x, y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(out, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let pattern: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
        let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
        pattern.hash(&mut self.branches);
        self.push(out, Op::Relu(a.0))
    }

    /// Softmax over each row, computed with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::RowSoftmax(a.0))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols()) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::RowLogSoftmax(a.0))
    }

    /// `log(a + c)` for a constant offset `c >= 0`.
    pub fn log(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = x.data.iter().find(|&&v| v + c < 0.0) {
            return Err(GradError::LogOfNegative(bad + c));
        }
        let out = x.map(|v| (v + c).ln());
        self.push(out, Op::Log(a.0, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a.0))
    }

    /// Elementwise `log(exp(a) + exp(b))`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("log_add_exp", x, y));
        }
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(&p, &q)| {
                let m = p.max(q);
                m + ((p - m).exp() + (q - m).exp()).ln()
            })
            .collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(out, Op::LogAddExp(a.0, b.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(GradError::BadLength {
                shape: x.shape.clone(),
                expected: 1,
                actual: 0,
            });
        }
        let s: f64 = x.data.iter().sum();
        let m = s / x.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a.0))
    }

    /// Sums each row into an `m x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = x.data.chunks(x.cols().max(1)).map(|r| r.iter().sum()).collect();
        let out = Tensor {
            shape: vec![x.rows(), 1],
            data,
        };
        self.push(out, Op::RowSum(a.0))
    }

    /// Selects rows of `a` (embedding lookup, row compaction).
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= x.rows() {
                return Err(GradError::IndexOutOfRange {
                    op: "index_rows",
                    index: i,
                    bound: x.rows(),
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        self.push(out, Op::IndexRows(a.0, idx.to_vec()))
    }

    /// Adds row `k` of `a` into row `idx[k]` of an `n_rows x cols` zero
    /// matrix. With repeated indices this is a segment sum.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(GradError::ShapeMismatch {
                op: "scatter_rows",
                left: x.shape.clone(),
                right: vec![idx.len()],
            });
        }
        let c = x.cols();
        let mut out = Tensor::zeros(&[n_rows, c]);
        for (k, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(GradError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    bound: n_rows,
                });
            }
            for (o, v) in out.data[i * c..(i + 1) * c].iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterRows(a.0, idx.to_vec()))
    }

    /// Picks `a[i, idx[i]]` from every row into an `m x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(GradError::ShapeMismatch {
                op: "pick",
                left: x.shape.clone(),
                right: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= x.cols() {
                return Err(GradError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    bound: x.cols(),
                });
            }
            data.push(x.get(r, j));
        }
        let out = Tensor {
            shape: vec![idx.len(), 1],
            data,
        };
        self.push(out, Op::Pick(a.0, idx.to_vec()))
    }

    /// Inverted dropout: entries where `keep` is false are zeroed and the rest
    /// are divided by `1 - rate`, so rate 0 (evaluation) is the identity.
    pub fn dropout_mask_apply(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GradError::DropoutRate(rate));
        }
        let x = self.value(a);
        if keep.len() != x.numel() {
            return Err(GradError::ShapeMismatch {
                op: "dropout",
                left: x.shape.clone(),
                right: vec![keep.len()],
            });
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(out, Op::Dropout(a.0, mask))
    }

    /// Reverse pass from a scalar root. Every leaf gets a gradient, zero if the
    /// root does not depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(GradError::NonScalarRoot(root_value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor {
            shape: root_value.shape.clone(),
            data: vec![1.0],
        });

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node.op {
                Op::Leaf => Some(
                    grads[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(&node.value.shape)),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].tracked;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let mut da = matmul_nt(g, val(*b));
                    da.shape = val(*a).shape.clone();
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = matmul_tn(val(*a), g);
                    db.shape = val(*b).shape.clone();
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                accumulate_if(grads, wants(*a), *a, || g.clone());
                accumulate_if(grads, wants(*b), *b, || g.clone());
            }
            Op::AddRow(a, b) => {
                accumulate_if(grads, wants(*a), *a, || g.clone());
                if wants(*b) {
                    let y = val(*b);
                    let mut db = Tensor::zeros(&y.shape);
                    for row in g.data.chunks(g.cols()) {
                        for (d, v) in db.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                accumulate_if(grads, wants(*a), *a, || g.clone());
                accumulate_if(grads, wants(*b), *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate_if(grads, wants(*a), *a, || zip_with(g, val(*b), |g, y| g * y));
                accumulate_if(grads, wants(*b), *b, || zip_with(g, val(*a), |g, x| g * x));
            }
            Op::Scale(a, c) => accumulate_if(grads, wants(*a), *a, || g.map(|v| v * c)),
            Op::AddScalar(a) => accumulate_if(grads, wants(*a), *a, || g.clone()),
            Op::Relu(a) => accumulate_if(grads, wants(*a), *a, || {
                zip_with(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })
            }),
            Op::RowSoftmax(a) => accumulate_if(grads, wants(*a), *a, || {
                let y = &node.value;
                let mut d = g.clone();
                let c = y.cols();
                for (drow, yrow) in d.data.chunks_mut(c).zip(y.data.chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                d
            }),
            Op::RowLogSoftmax(a) => accumulate_if(grads, wants(*a), *a, || {
                let y = &node.value;
                let mut d = g.clone();
                let c = y.cols();
                for (drow, yrow) in d.data.chunks_mut(c).zip(y.data.chunks(c)) {
                    let total: f64 = drow.iter().sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv -= yv.exp() * total;
                    }
                }
                d
            }),
            Op::Log(a, c) => {
                accumulate_if(grads, wants(*a), *a, || zip_with(g, val(*a), |g, x| g / (x + c)))
            }
            Op::Exp(a) => accumulate_if(grads, wants(*a), *a, || zip_with(g, &node.value, |g, y| g * y)),
            Op::LogAddExp(a, b) => {
                let y = &node.value;
                accumulate_if(grads, wants(*a), *a, || {
                    let w = zip_with(val(*a), y, |x, y| (x - y).exp());
                    zip_with(g, &w, |g, w| g * w)
                });
                accumulate_if(grads, wants(*b), *b, || {
                    let w = zip_with(val(*b), y, |x, y| (x - y).exp());
                    zip_with(g, &w, |g, w| g * w)
                });
            }
            Op::Sum(a) => accumulate_if(grads, wants(*a), *a, || {
                let s = g.item();
                val(*a).map(|_| s)
            }),
            Op::Mean(a) => accumulate_if(grads, wants(*a), *a, || {
                let x = val(*a);
                let s = g.item() / x.numel() as f64;
                x.map(|_| s)
            }),
            Op::RowSum(a) => accumulate_if(grads, wants(*a), *a, || {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(&x.shape);
                for (drow, gv) in d.data.chunks_mut(c.max(1)).zip(&g.data) {
                    drow.iter_mut().for_each(|v| *v = *gv);
                }
                d
            }),
            Op::IndexRows(a, idx) => accumulate_if(grads, wants(*a), *a, || {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(&x.shape);
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                d
            }),
            Op::ScatterRows(a, idx) => accumulate_if(grads, wants(*a), *a, || {
                let x = val(*a);
                let mut data = Vec::with_capacity(x.numel());
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }),
            Op::Pick(a, idx) => accumulate_if(grads, wants(*a), *a, || {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(&x.shape);
                for (r, &j) in idx.iter().enumerate() {
                    d.data[r * c + j] = g.data[r];
                }
                d
            }),
            Op::Dropout(a, mask) => accumulate_if(grads, wants(*a), *a, || {
                let data = g.data.iter().zip(mask).map(|(g, m)| g * m).collect();
                Tensor {
                    shape: g.shape.clone(),
                    data,
                }
            }),
        }
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Constant | Op::StopGradient => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::LogAddExp(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::RowSoftmax(a)
        | Op::RowLogSoftmax(a)
        | Op::Log(a, _)
        | Op::Exp(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowSum(a)
        | Op::IndexRows(a, _)
        | Op::ScatterRows(a, _)
        | Op::Pick(a, _)
        | Op::Dropout(a, _) => vec![*a],
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, d: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_if(grads: &mut [Option<Tensor>], wanted: bool, id: usize, d: impl FnOnce() -> Tensor) {
    if wanted {
        accumulate(grads, id, d());
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for row in out.data.chunks_mut(x.cols().max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `a (m x k) * b (k x n)`.
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `g (m x n) * b^T` where `b` is `k x n`.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = (b.rows(), b.cols());
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b.data[p * n + j];
        }
    }
    let bt = Tensor {
        shape: vec![n, k],
        data: bt,
    };
    matmul_nn(g, &bt)
}

/// `a^T * g` where `a` is `m x k` and `g` is `m x n`.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf.
    ///
    /// Panics if `v` is not a leaf of the tape that produced these gradients.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.leaves[v.0]
            .as_ref()
            .expect("gradient requested for a non-leaf node")
    }
}

/// Finite-difference comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a kink or a discrete branch.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares analytic gradients of `f` against central differences with step
/// `h`. The relative error of each entry is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` must be deterministic: it is evaluated twice at the unperturbed point
/// and a differing value is an error. Entries whose `+h` or `-h` evaluation
/// changes the tape's [`Tape::branch_signature`] sit on a non-differentiable
/// point and are excluded.
///
/// `f` may fail with any error type that can absorb a [`GradError`].
pub fn gradient_check<F, E>(f: F, params: &[Tensor], h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<GradError>,
{
    let eval = |ps: &[Tensor]| -> std::result::Result<(f64, u64), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.scalar(out), tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.scalar(root);
    let signature = tape.branch_signature();
    let grads = tape.backward(root)?;

    let (again, _) = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(GradError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        tol,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut check = ParamCheck {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in 0..params[pi].numel() {
            let orig = work[pi].data[k];
            work[pi].data[k] = orig + h;
            let (plus, sig_plus) = eval(&work)?;
            work[pi].data[k] = orig - h;
            let (minus, sig_minus) = eval(&work)?;
            work[pi].data[k] = orig;
            if sig_plus != signature || sig_minus != signature {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}
