//! Dense row-major matrices and a reverse-mode tape specialised to the
//! handful of operations the projection networks and their losses need.
//!
//! Every value on the tape is a [`DenseMatrix`]. A batch of vectors is a
//! matrix with one row per sample; a single vector is a `1 x n` matrix and a
//! scalar is `1 x 1`. Gradients are produced by [`Tape::backward`], which walks
//! the recorded nodes once, newest first.
//!
//! [`finite_diff_gradient`] is a tape-free central-difference estimator used
//! to check the analytic gradients.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, expected {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar node, got a {rows}x{cols} value")]
    NotScalar { rows: usize, cols: usize },
    #[error("finite difference: loss is not finite when perturbing coordinate {coord}")]
    NonFiniteLoss { coord: usize },
    #[error("finite difference step must be positive and finite, got {0}")]
    BadEpsilon(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, expected: impl fmt::Display, actual: impl fmt::Display) -> TensorError {
    TensorError::DimMismatch {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// How the squared-error distance reduces over coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceReduction {
    /// Mean of squared coordinate differences.
    Mean,
    /// Sum of squared coordinate differences.
    Sum,
}

/// The reduction used by every distance in the crate.
pub const DISTANCE_REDUCTION: DistanceReduction = DistanceReduction::Mean;

#[inline]
pub(crate) fn distance_divisor(len: usize) -> f64 {
    match DISTANCE_REDUCTION {
        DistanceReduction::Mean => len as f64,
        DistanceReduction::Sum => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch("DenseMatrix::from_vec", rows * cols, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "DenseMatrix::from_vec",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(mismatch("DenseMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// A `1 x n` matrix.
    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::from_vec(1, 1, vec![v])
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a * b^T` for row-major `a: n x k`, `b: m x k`.
fn matmul_a_bt(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(a.cols, b.cols);
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut c = DenseMatrix::zeros(n, m);
    if n == 0 || m == 0 || k == 0 {
        return c;
    }
    // SAFETY: buffer lengths match the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.data.as_ptr(), k as isize, 1,
            b.data.as_ptr(), 1, k as isize,
            0.0,
            c.data.as_mut_ptr(), m as isize, 1,
        );
    }
    c
}

/// `c = a * b` for row-major `a: n x k`, `b: k x m`.
fn matmul_a_b(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(a.cols, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut c = DenseMatrix::zeros(n, m);
    if n == 0 || m == 0 || k == 0 {
        return c;
    }
    // SAFETY: buffer lengths match the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.data.as_ptr(), k as isize, 1,
            b.data.as_ptr(), m as isize, 1,
            0.0,
            c.data.as_mut_ptr(), m as isize, 1,
        );
    }
    c
}

/// `c = a^T * b` for row-major `a: k x n`, `b: k x m`.
fn matmul_at_b(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(a.rows, b.rows);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut c = DenseMatrix::zeros(n, m);
    if n == 0 || m == 0 || k == 0 {
        return c;
    }
    // SAFETY: buffer lengths match the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.data.as_ptr(), 1, n as isize,
            b.data.as_ptr(), m as isize, 1,
            0.0,
            c.data.as_mut_ptr(), m as isize, 1,
        );
    }
    c
}

/// Weight and bias of one fully connected layer, `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out_dim x in_dim`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(mismatch("LayerParams::new", weight.rows(), bias.len()));
        }
        if !bias.iter().all(|b| b.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "LayerParams::new",
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.weight.bit_eq(&other.weight)
            && self.bias.len() == other.bias.len()
            && self
                .bias
                .iter()
                .zip(&other.bias)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Applies the layer to every row of `x` (`batch x in_dim`).
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.in_dim() {
            return Err(mismatch("affine", self.in_dim(), x.cols()));
        }
        let mut out = matmul_a_bt(x, &self.weight);
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out.check_finite("affine")
    }
}

/// Untaped single-vector affine map.
pub fn affine(layer: &LayerParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(layer.forward(&DenseMatrix::row_vector(x)?)?.into_vec())
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Per-row squared-error distance of two equally shaped matrices, as a
/// `rows x 1` column.
pub fn row_distances(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "row_distances",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let div = distance_divisor(a.cols);
    let data = (0..a.rows)
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / div
        })
        .collect();
    DenseMatrix::from_vec(a.rows, 1, data)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a layer registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine { x: Var, layer: LayerId },
    Relu { x: Var },
    RowDistance { a: Var, b: Var },
    Hinge { pos: Var, neg: Var },
    Mean { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Records a forward computation for one backward pass.
///
/// Layers are borrowed, never copied; a tape is meant to live for a single
/// training step.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    layers: Vec<&'p LayerParams>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            layers: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn register_layer(&mut self, layer: &'p LayerParams) -> LayerId {
        self.layers.push(layer);
        LayerId(self.layers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding data (features, targets). Gradients reach it but it is
    /// never updated.
    pub fn input(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Input, value)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// The value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        let m = self.value(v);
        (m.shape() == (1, 1)).then(|| m.data[0])
    }

    /// Applies a registered layer row-wise: `x W^T + b`.
    pub fn affine(&mut self, layer: LayerId, x: Var) -> Result<Var> {
        let out = self.layers[layer.0].forward(self.value(x))?;
        Ok(self.push(Op::Affine { x, layer }, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        self.push(Op::Relu { x }, out)
    }

    /// Per-row squared-error distance between two equally shaped nodes.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = row_distances(self.value(a), self.value(b))?;
        Ok(self.push(Op::RowDistance { a, b }, out))
    }

    /// Elementwise `max(0, pos - neg + margin)`.
    pub fn hinge(&mut self, pos: Var, neg: Var, margin: f64) -> Result<Var> {
        let (p, n) = (self.value(pos), self.value(neg));
        if p.shape() != n.shape() {
            return Err(mismatch(
                "hinge",
                format!("{}x{}", p.rows, p.cols),
                format!("{}x{}", n.rows, n.cols),
            ));
        }
        let data = p
            .data
            .iter()
            .zip(&n.data)
            .map(|(a, b)| (a - b + margin).max(0.0))
            .collect();
        let out = DenseMatrix::from_vec(p.rows, p.cols, data)?;
        Ok(self.push(Op::Hinge { pos, neg }, out))
    }

    /// Mean of all entries, as a `1 x 1` node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        if m.data.is_empty() {
            return Err(mismatch("mean", "a nonempty value", "0 entries"));
        }
        let out = DenseMatrix::scalar(m.data.iter().sum::<f64>() / m.data.len() as f64)?;
        Ok(self.push(Op::Mean { x }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(
                "add",
                format!("{}x{}", x.rows, x.cols),
                format!("{}x{}", y.rows, y.cols),
            ));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let out = out.check_finite("add")?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= factor;
        }
        let out = out.check_finite("scale")?;
        Ok(self.push(Op::Scale { x, factor }, out))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Nodes are visited once each in reverse recording order, which is a
    /// reverse topological order since operands always precede their results.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = self.value(out);
        if root.shape() != (1, 1) {
            return Err(TensorError::NotScalar {
                rows: root.rows,
                cols: root.cols,
            });
        }
        let mut adjoint: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adjoint[out.0] = Some(DenseMatrix {
            rows: 1,
            cols: 1,
            data: vec![1.0],
        });
        let mut layer_grads: Vec<LayerParams> = self
            .layers
            .iter()
            .map(|l| LayerParams::zeros(l.in_dim(), l.out_dim()))
            .collect();

        fn accumulate(slot: &mut Option<DenseMatrix>, g: DenseMatrix) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Input => adjoint[idx] = Some(g),
                Op::Affine { x, layer } => {
                    let params = self.layers[layer.0];
                    let xv = self.value(x);
                    let grad = &mut layer_grads[layer.0];
                    grad.weight.add_assign(&matmul_at_b(&g, xv));
                    for r in 0..g.rows {
                        for (b, d) in grad.bias.iter_mut().zip(g.row(r)) {
                            *b += d;
                        }
                    }
                    accumulate(&mut adjoint[x.0], matmul_a_b(&g, &params.weight));
                }
                Op::Relu { x } => {
                    let xv = self.value(x);
                    let mut dx = g;
                    for (d, v) in dx.data.iter_mut().zip(&xv.data) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut adjoint[x.0], dx);
                }
                Op::RowDistance { a, b } => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let scale = 2.0 / distance_divisor(av.cols);
                    let mut da = DenseMatrix::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        let gr = g.data[r] * scale;
                        let row = &mut da.data[r * av.cols..(r + 1) * av.cols];
                        for ((d, x), y) in row.iter_mut().zip(av.row(r)).zip(bv.row(r)) {
                            *d = gr * (x - y);
                        }
                    }
                    let mut db = da.clone();
                    for v in &mut db.data {
                        *v = -*v;
                    }
                    accumulate(&mut adjoint[a.0], da);
                    accumulate(&mut adjoint[b.0], db);
                }
                Op::Hinge { pos, neg } => {
                    let mut dp = g;
                    for (d, v) in dp.data.iter_mut().zip(&node.value.data) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    let mut dn = dp.clone();
                    for v in &mut dn.data {
                        *v = -*v;
                    }
                    accumulate(&mut adjoint[pos.0], dp);
                    accumulate(&mut adjoint[neg.0], dn);
                }
                Op::Mean { x } => {
                    let xv = self.value(x);
                    let n = xv.data.len() as f64;
                    let dx = DenseMatrix {
                        rows: xv.rows,
                        cols: xv.cols,
                        data: vec![g.data[0] / n; xv.data.len()],
                    };
                    accumulate(&mut adjoint[x.0], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoint[a.0], g.clone());
                    accumulate(&mut adjoint[b.0], g);
                }
                Op::Scale { x, factor } => {
                    let mut dx = g;
                    for v in &mut dx.data {
                        *v *= factor;
                    }
                    accumulate(&mut adjoint[x.0], dx);
                }
            }
        }
        // Only leaf adjoints survive: interior ones were taken above.
        Ok(Gradients {
            layers: layer_grads,
            leaves: adjoint,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<LayerParams>,
    leaves: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient for a registered layer; zero if the layer was never used.
    pub fn layer(&self, id: LayerId) -> &LayerParams {
        &self.layers[id.0]
    }

    /// Gradient for an input leaf, or `None` if it does not influence the
    /// output (or `v` is not a leaf).
    pub fn wrt(&self, v: Var) -> Option<&DenseMatrix> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_layers(self) -> Vec<LayerParams> {
        self.layers
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Central-difference gradient estimate of `loss` at `params`.
///
/// Evaluates `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` per coordinate.
pub fn finite_diff_gradient<F>(mut loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::BadEpsilon(eps));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = loss(&work);
        work[i] = orig - eps;
        let down = loss(&work);
        work[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(TensorError::NonFiniteLoss { coord: i });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}
