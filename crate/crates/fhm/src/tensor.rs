//! Dense row-major matrices and a reverse-mode differentiation tape.
//!
//! The tape is an arena of nodes indexed by [`NodeId`]. Recording an operation
//! evaluates it eagerly, so every node always carries its forward value;
//! [`Tape::backward`] then walks the arena in reverse creation order and
//! accumulates vector-Jacobian products. Parents always precede children in
//! the arena, which keeps the walk a single reverse scan.
//!
//! Conventions, asserted by tests:
//! - every public operation leaves only finite entries behind (no NaN/Inf);
//! - subgradients at kinks (`relu`, `abs` via relu, `l2_norm` at zero,
//!   `row_normalize` of a zero row) are 0;
//! - `sign_stop_gradient` is constant in the backward pass: it contributes no
//!   gradient to its input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    DimensionMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: produced a non-finite entry")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_str(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}

/// Dense matrix of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialization shim so deserialized matrices are re-validated.
#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = String;

    fn try_from(raw: RawMatrix) -> std::result::Result<Self, String> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data).map_err(|e| e.to_string())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Usage(format!(
                "from_vec: {} entries do not fill a {} matrix",
                data.len(),
                shape_str(rows, cols)
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                assert!(v.is_finite(), "from_fn produced a non-finite entry");
                data.push(v);
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_row(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn from_column(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access for the optimizer. Writes here may transiently be
    /// non-finite; the next loss evaluation reports them as a clean error.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        assert!(v.is_finite(), "set: non-finite entry");
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        assert!(r < self.rows, "row out of bounds");
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        assert!(c < self.cols, "column out of bounds");
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on a non-1x1 matrix");
        self.data[0]
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: shape_str(self.rows, self.cols),
                rhs: shape_str(other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.data[k * other.cols + c];
                }
            }
        }
        out.check_finite("matmul")
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op,
                lhs: shape_str(self.rows, self.cols),
                rhs: shape_str(other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
        .check_finite(op)
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        assert!(factor.is_finite(), "scale: non-finite factor");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
        .check_finite("scale")
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        assert!(!self.data.is_empty(), "mean of an empty matrix");
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// L2 norm of each row, in row order.
    pub fn row_l2_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Sign with the convention sign(0) = 0.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Handle to a node in a [`Tape`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softsign(NodeId),
    Relu(NodeId),
    SignStopGradient(NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SqNorm(NodeId),
    L2Norm(NodeId),
    RowNormalize(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Reverse-mode differentiation tape over [`Matrix`] values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf. Its gradient is reported by `backward`.
    pub fn var(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf { requires_grad: true }, value)
    }

    /// Registers a non-differentiable leaf (inputs, masks, targets).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            value,
        )
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.val(a).matmul(self.val(b))?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// Elementwise addition. As a special case a `1 x c` right operand is
    /// broadcast over the rows of an `r x c` left operand (bias rows).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        let value = if av.shape() == bv.shape() {
            av.add(bv)?
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            Matrix::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) + bv.get(0, c))
                .check_finite("add")?
        } else {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                lhs: shape_str(av.rows(), av.cols()),
                rhs: shape_str(bv.rows(), bv.cols()),
            });
        };
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.val(a).hadamard(self.val(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a).map(f64::tanh);
        Ok(self.push(Op::Tanh(a), value))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a).map(sigmoid);
        Ok(self.push(Op::Sigmoid(a), value))
    }

    pub fn softsign(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a).map(softsign);
        Ok(self.push(Op::Softsign(a), value))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a).map(|v| v.max(0.0));
        Ok(self.push(Op::Relu(a), value))
    }

    /// Elementwise sign treated as a constant by the backward pass.
    pub fn sign_stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a).map(sign);
        Ok(self.push(Op::SignStopGradient(a), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.val(a).scale(factor)?;
        Ok(self.push(Op::Scale(a, factor), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.val(a).transpose();
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::from_vec(1, 1, vec![self.val(a).sum()])?;
        Ok(self.push(Op::Sum(a), value))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.val(a).data().is_empty() {
            return Err(TensorError::Usage("mean: empty matrix".into()));
        }
        let value = Matrix::from_vec(1, 1, vec![self.val(a).mean()])?;
        Ok(self.push(Op::Mean(a), value))
    }

    /// Sum of squared entries, a `1 x 1` result.
    pub fn sq_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::from_vec(1, 1, vec![self.val(a).sq_norm()])?;
        Ok(self.push(Op::SqNorm(a), value))
    }

    /// Euclidean norm of all entries, a `1 x 1` result.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::from_vec(1, 1, vec![self.val(a).l2_norm()])?;
        Ok(self.push(Op::L2Norm(a), value))
    }

    /// Scales each row to unit L2 norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.val(a);
        let norms = av.row_l2_norms();
        let value = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
            if norms[r] == 0.0 {
                0.0
            } else {
                av.get(r, c) / norms[r]
            }
        })
        .check_finite("row_normalize")?;
        Ok(self.push(Op::RowNormalize(a), value))
    }

    /// `a - b`, composed from scale and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Elementwise absolute value, composed as relu(x) + relu(-x) so the
    /// subgradient at 0 is 0.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let pos = self.relu(a)?;
        let neg = self.scale(a, -1.0)?;
        let neg = self.relu(neg)?;
        self.add(pos, neg)
    }

    /// Cosine-similarity matrix of the rows of `a`: entries are 0 whenever
    /// either row has zero norm.
    pub fn cosine_similarity(&mut self, a: NodeId) -> Result<NodeId> {
        let unit = self.row_normalize(a)?;
        let unit_t = self.transpose(unit)?;
        self.matmul(unit, unit_t)
    }

    /// Backward pass from a `1 x 1` root with seed gradient 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::Usage(
                "backward: node is not on this tape".into(),
            ));
        }
        if !self.val(root).is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward: root must be 1x1, got {}",
                shape_str(self.val(root).rows(), self.val(root).cols())
            )));
        }
        self.backward_seeded(root, Matrix::from_vec(1, 1, vec![1.0])?)
    }

    /// Backward pass with an explicit seed of the root's shape.
    pub fn backward_seeded(&self, root: NodeId, seed: Matrix) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::Usage(
                "backward: node is not on this tape".into(),
            ));
        }
        if seed.shape() != self.val(root).shape() {
            return Err(TensorError::DimensionMismatch {
                op: "backward",
                lhs: shape_str(self.val(root).rows(), self.val(root).cols()),
                rhs: shape_str(seed.rows(), seed.cols()),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate_parents(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
        if let Op::Leaf {
            requires_grad: false,
        } = self.nodes[id.0].op
        {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => *existing = existing.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn accumulate_parents(
        &self,
        idx: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| -> Result<()> {
            self.add_grad(grads, id, delta)
        };

        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let bt = self.val(*b).transpose();
                add_to(grads, *a, g.matmul(&bt)?)?;
                let at = self.val(*a).transpose();
                add_to(grads, *b, at.matmul(g)?)?;
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone())?;
                let bv = self.val(*b);
                if bv.shape() == g.shape() {
                    add_to(grads, *b, g.clone())?;
                } else {
                    // Broadcast bias row: gradient is the column sum.
                    let summed = Matrix::from_fn(1, g.cols(), |_, c| {
                        (0..g.rows()).map(|r| g.get(r, c)).sum()
                    });
                    add_to(grads, *b, summed)?;
                }
            }
            Op::Hadamard(a, b) => {
                add_to(grads, *a, g.hadamard(self.val(*b))?)?;
                add_to(grads, *b, g.hadamard(self.val(*a))?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.hadamard(&y.map(|v| 1.0 - v * v))?)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.hadamard(&y.map(|v| v * (1.0 - v)))?)?;
            }
            Op::Softsign(a) => {
                let x = self.val(*a);
                let d = x.map(|v| {
                    let denom = 1.0 + v.abs();
                    1.0 / (denom * denom)
                });
                add_to(grads, *a, g.hadamard(&d)?)?;
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                add_to(grads, *a, g.hadamard(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?)?;
            }
            Op::SignStopGradient(a) => {
                // Constant in the backward pass by definition.
                let _ = a;
            }
            Op::Scale(a, factor) => {
                add_to(grads, *a, g.scale(*factor)?)?;
            }
            Op::Transpose(a) => {
                add_to(grads, *a, g.transpose())?;
            }
            Op::Sum(a) => {
                let gv = g.scalar_value();
                let x = self.val(*a);
                add_to(grads, *a, x.map(|_| gv))?;
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let gv = g.scalar_value() / x.data().len() as f64;
                add_to(grads, *a, x.map(|_| gv))?;
            }
            Op::SqNorm(a) => {
                let gv = g.scalar_value();
                add_to(grads, *a, self.val(*a).scale(2.0 * gv)?)?;
            }
            Op::L2Norm(a) => {
                let y = self.nodes[idx].value.scalar_value();
                if y != 0.0 {
                    let gv = g.scalar_value();
                    add_to(grads, *a, self.val(*a).scale(gv / y)?)?;
                }
            }
            Op::RowNormalize(a) => {
                let x = self.val(*a);
                let y = &self.nodes[idx].value;
                let mut delta = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..x.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..x.cols() {
                        delta.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norm);
                    }
                }
                add_to(grads, *a, delta)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by a backward pass, addressed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient accumulated at `id`, or `None` if no path reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
