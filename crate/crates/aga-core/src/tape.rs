//! Reverse-mode differentiation over dense, row-major `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! replays the record once in reverse, accumulating vector-Jacobian products
//! into per-node gradient buffers. Handles ([`Tensor`]) are plain indices
//! into the record, so the graph is append-only and trivially topologically
//! ordered: every input of a node was created before the node itself.
//!
//! Scalars are rank-0 tensors (shape `[]`). All forward arithmetic is
//! sequential and deterministic; transcendentals come from `libm`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    Transpose { x: Tensor, rows: usize, cols: usize },
    Reshape { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, c: f64 },
    /// `out[j,k] = x[j,k] + v[k]`
    AddRowBroadcast { x: Tensor, v: Tensor, rows: usize, cols: usize },
    /// `out[j,k] = x[j,k] / v[j]`
    DivRows { x: Tensor, v: Tensor, rows: usize, cols: usize },
    Exp { x: Tensor },
    Log { x: Tensor },
    Tanh { x: Tensor },
    SumAll { x: Tensor },
    RowSum { x: Tensor, rows: usize, cols: usize },
    /// Gradient routes to the first arg-extreme index of each row.
    RowMin { x: Tensor, arg: Vec<usize>, cols: usize },
    RowMax { x: Tensor, arg: Vec<usize>, cols: usize },
    /// Per-row min-max normalization; constant rows map to all ones.
    MinMaxRows { x: Tensor, imin: Vec<usize>, imax: Vec<usize>, rows: usize, cols: usize },
    RowSoftmax { x: Tensor, mask: Option<Vec<bool>>, rows: usize, cols: usize },
    L2NormalizeRows { x: Tensor, eps: f64, rows: usize, cols: usize },
    /// Elementwise product with a constant (non-differentiated) mask.
    MulMask { x: Tensor, mask: Vec<f64> },
    GatherRows { x: Tensor, idx: Vec<usize>, cols: usize },
    /// Place rows of `x` at `idx` inside a zero matrix of `out_rows` rows.
    ScatterRows { x: Tensor, idx: Vec<usize>, cols: usize },
    ConcatRows { xs: Vec<Tensor>, cols: usize },
    /// Stack rank-1 vectors into a matrix.
    StackRows { xs: Vec<Tensor>, cols: usize },
    TakeDiag { x: Tensor, n: usize },
    Dot { a: Tensor, b: Tensor },
    /// `out[c] = sum_j w[j] * x[j,c]` with constant weights.
    WeightedRowSum { x: Tensor, w: Vec<f64>, rows: usize, cols: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Tensor(self.nodes.len() - 1)
    }

    fn requires(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Register a leaf tensor. `requires_grad` marks it as a parameter for
    /// gradient accumulation.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::DimMismatch {
                what: "leaf data length",
                expected: numel(shape),
                actual: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Non-differentiated input data.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, c: f64) -> Tensor {
        self.push(Vec::new(), vec![c], false, Op::Leaf)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        self.nodes[t.0].value[0]
    }

    /// Accumulated gradient, if any reached this tensor.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Gradient with absent buffers read as zero.
    pub fn grad_or_zeros(&self, t: Tensor) -> Vec<f64> {
        match &self.nodes[t.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[t.0].value.len()],
        }
    }

    /// Clear all gradient buffers (forward values stay).
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn dims2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(t);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: Vec::new() });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += aip * bv[p * n + j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { x, rows, cols }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::DimMismatch {
                what: "reshape element count",
                expected: self.value(x).len(),
                actual: numel(shape),
            });
        }
        let v = self.value(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape.to_vec(), v, rg, Op::Reshape { x }))
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, v, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, v, rg, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, v, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let v: Vec<f64> = self.value(x).iter().map(|t| t * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, v, rg, Op::Scale { x, c })
    }

    /// Add a length-`cols` vector to every row of a matrix (bias add).
    pub fn add_row_broadcast(&mut self, x: Tensor, v: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "add_row_broadcast")?;
        if self.shape(v) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = self.value(x).to_vec();
        {
            let vv = self.value(v);
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += vv[c];
                }
            }
        }
        let rg = self.requires(x) || self.requires(v);
        Ok(self.push(vec![rows, cols], out, rg, Op::AddRowBroadcast { x, v, rows, cols }))
    }

    /// Divide every row `j` of `x` by scalar `v[j]`.
    pub fn div_rows(&mut self, x: Tensor, v: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "div_rows")?;
        if self.shape(v) != [rows] {
            return Err(Error::ShapeMismatch {
                op: "div_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = self.value(x).to_vec();
        {
            let vv = self.value(v);
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] /= vv[r];
                }
            }
        }
        let rg = self.requires(x) || self.requires(v);
        Ok(self.push(vec![rows, cols], out, rg, Op::DivRows { x, v, rows, cols }))
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        let v: Vec<f64> = self.value(x).iter().map(|&t| libm::exp(t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, v, rg, Op::Exp { x })
    }

    pub fn log(&mut self, x: Tensor) -> Tensor {
        let v: Vec<f64> = self.value(x).iter().map(|&t| libm::log(t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, v, rg, Op::Log { x })
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        let v: Vec<f64> = self.value(x).iter().map(|&t| libm::tanh(t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, v, rg, Op::Tanh { x })
    }

    /// Sum of all entries, rank-0 output.
    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let s = self.value(x).iter().sum();
        let rg = self.requires(x);
        self.push(Vec::new(), vec![s], rg, Op::SumAll { x })
    }

    /// Mean of all entries.
    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums of a matrix: `[J×K] -> [J]`.
    pub fn row_sum(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "row_sum")?;
        let xv = self.value(x);
        let out: Vec<f64> = (0..rows).map(|r| xv[r * cols..(r + 1) * cols].iter().sum()).collect();
        let rg = self.requires(x);
        Ok(self.push(vec![rows], out, rg, Op::RowSum { x, rows, cols }))
    }

    fn row_extreme(&mut self, x: Tensor, is_max: bool) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "row_extreme")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                let better = if is_max { v > row[best] } else { v < row[best] };
                if better {
                    best = c;
                }
            }
            out.push(row[best]);
            arg.push(best);
        }
        let rg = self.requires(x);
        let op = if is_max {
            Op::RowMax { x, arg, cols }
        } else {
            Op::RowMin { x, arg, cols }
        };
        Ok(self.push(vec![rows], out, rg, op))
    }

    /// Per-row minimum; on ties the gradient routes to the first minimum.
    pub fn row_min(&mut self, x: Tensor) -> Result<Tensor> {
        self.row_extreme(x, false)
    }

    /// Per-row maximum; on ties the gradient routes to the first maximum.
    pub fn row_max(&mut self, x: Tensor) -> Result<Tensor> {
        self.row_extreme(x, true)
    }

    /// Per-row min-max normalization to `[0, 1]`. Constant rows map to all
    /// ones and are treated as locally constant in the backward pass.
    pub fn minmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "minmax_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        let mut imin = Vec::with_capacity(rows);
        let mut imax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut lo = 0usize;
            let mut hi = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v < row[lo] {
                    lo = c;
                }
                if v > row[hi] {
                    hi = c;
                }
            }
            let range = row[hi] - row[lo];
            if range == 0.0 {
                for c in 0..cols {
                    out[r * cols + c] = 1.0;
                }
                // Mark the constant row by imin == imax.
                imin.push(0);
                imax.push(0);
            } else {
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - row[lo]) / range;
                }
                imin.push(lo);
                imax.push(hi);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![rows, cols], out, rg, Op::MinMaxRows { x, imin, imax, rows, cols }))
    }

    /// Numerically stabilized per-row softmax. Masked entries are exactly
    /// zero in the output and receive no gradient.
    pub fn row_softmax(&mut self, x: Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "row_softmax")?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::DimMismatch {
                    what: "softmax mask length",
                    expected: rows * cols,
                    actual: m.len(),
                });
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let live = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            let mut any_live = false;
            for c in 0..cols {
                if live(c) {
                    any_live = true;
                    let v = xv[r * cols + c];
                    if v.is_nan() {
                        return Err(Error::NonFinite { context: alloc::format!("softmax input row {r}") });
                    }
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any_live {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if live(c) {
                    let e = libm::exp(xv[r * cols + c] - max);
                    out[r * cols + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        let rg = self.requires(x);
        let mask = mask.map(|m| m.to_vec());
        Ok(self.push(vec![rows, cols], out, rg, Op::RowSoftmax { x, mask, rows, cols }))
    }

    /// Normalize each row (or a rank-1 vector) to unit length, with an
    /// additive `eps` in the denominator: `x / (‖x‖ + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::ShapeMismatch { op: "l2_normalize_rows", lhs: s, rhs: Vec::new() }),
        };
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            let denom = norm + eps;
            for c in 0..cols {
                out[r * cols + c] = row[c] / denom;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(s, out, rg, Op::L2NormalizeRows { x, eps, rows, cols }))
    }

    /// Multiply by a constant 0/1 (or arbitrary) mask. The mask is a
    /// constant of the backward pass: gradient flows only through kept
    /// entries.
    pub fn mul_mask(&mut self, x: Tensor, mask: &[f64]) -> Result<Tensor> {
        if mask.len() != self.value(x).len() {
            return Err(Error::DimMismatch {
                what: "mask length",
                expected: self.value(x).len(),
                actual: mask.len(),
            });
        }
        let v: Vec<f64> = self.value(x).iter().zip(mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, v, rg, Op::MulMask { x, mask: mask.to_vec() }))
    }

    /// Select rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "gather_rows")?;
        for &i in idx {
            if i >= rows {
                return Err(Error::DimMismatch { what: "gather index", expected: rows, actual: i });
            }
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires(x);
        Ok(self.push(vec![idx.len(), cols], out, rg, Op::GatherRows { x, idx: idx.to_vec(), cols }))
    }

    /// Place the rows of `x` at strictly ascending positions `idx` of an
    /// otherwise-zero `[out_rows × cols]` matrix.
    pub fn scatter_rows(&mut self, x: Tensor, idx: &[usize], out_rows: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "scatter_rows")?;
        if idx.len() != rows {
            return Err(Error::DimMismatch { what: "scatter index count", expected: rows, actual: idx.len() });
        }
        for w in idx.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::DimMismatch { what: "scatter indices must ascend", expected: w[0] + 1, actual: w[1] });
            }
        }
        if let Some(&last) = idx.last() {
            if last >= out_rows {
                return Err(Error::DimMismatch { what: "scatter index", expected: out_rows, actual: last });
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; out_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            out[i * cols..(i + 1) * cols].copy_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires(x);
        Ok(self.push(vec![out_rows, cols], out, rg, Op::ScatterRows { x, idx: idx.to_vec(), cols }))
    }

    /// Concatenate matrices along the row axis.
    pub fn concat_rows(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (_, cols) = self.dims2(xs[0], "concat_rows")?;
        let mut total = 0;
        for &t in xs {
            let (r, c) = self.dims2(t, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(t).to_vec(),
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * cols);
        for &t in xs {
            out.extend_from_slice(self.value(t));
        }
        let rg = xs.iter().any(|&t| self.requires(t));
        Ok(self.push(vec![total, cols], out, rg, Op::ConcatRows { xs: xs.to_vec(), cols }))
    }

    /// Stack rank-1 vectors of equal length into a `[n × d]` matrix.
    pub fn stack_rows(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = match self.shape(xs[0]) {
            [d] => *d,
            s => return Err(Error::ShapeMismatch { op: "stack_rows", lhs: s.to_vec(), rhs: Vec::new() }),
        };
        let mut out = Vec::with_capacity(xs.len() * d);
        for &t in xs {
            if self.shape(t) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: self.shape(t).to_vec(),
                });
            }
            out.extend_from_slice(self.value(t));
        }
        let rg = xs.iter().any(|&t| self.requires(t));
        Ok(self.push(vec![xs.len(), d], out, rg, Op::StackRows { xs: xs.to_vec(), cols: d }))
    }

    /// Diagonal of a square matrix.
    pub fn take_diag(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "take_diag")?;
        if rows != cols {
            return Err(Error::ShapeMismatch {
                op: "take_diag",
                lhs: self.shape(x).to_vec(),
                rhs: Vec::new(),
            });
        }
        let xv = self.value(x);
        let out: Vec<f64> = (0..rows).map(|i| xv[i * cols + i]).collect();
        let rg = self.requires(x);
        Ok(self.push(vec![rows], out, rg, Op::TakeDiag { x, n: rows }))
    }

    /// Inner product of two equally sized tensors (flattened), rank-0 out.
    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Vec::new(), vec![s], rg, Op::Dot { a, b }))
    }

    /// Weighted sum of matrix rows with constant weights: `[J×C] -> [C]`.
    pub fn weighted_row_sum(&mut self, x: Tensor, w: &[f64]) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x, "weighted_row_sum")?;
        if w.len() != rows {
            return Err(Error::DimMismatch { what: "row weights", expected: rows, actual: w.len() });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += w[r] * xv[r * cols + c];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![cols], out, rg, Op::WeightedRowSum { x, w: w.to_vec(), rows, cols }))
    }

    /// `x·W + b` for `x: [J×K]`, `w: [K×N]`, `b: [N]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    /// View a contiguous range of a tensor's flat storage as a new tensor
    /// of the given shape (composite of reshape and gather).
    pub fn slice_flat(&mut self, x: Tensor, offset: usize, len: usize, shape: &[usize]) -> Result<Tensor> {
        let total = self.value(x).len();
        if offset + len > total {
            return Err(Error::DimMismatch { what: "flat slice range", expected: total, actual: offset + len });
        }
        let col = self.reshape(x, &[total, 1])?;
        let idx: Vec<usize> = (offset..offset + len).collect();
        let rows = self.gather_rows(col, &idx)?;
        self.reshape(rows, shape)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn add_grad(&mut self, t: Tensor, contrib: &[f64]) {
        let node = &mut self.nodes[t.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Gradients of `requires_grad`
    /// tensors accumulate across repeated calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if !self.shape(loss).is_empty() {
            return Err(Error::NotScalar { shape: self.shape(loss).to_vec() });
        }
        // Local upstream buffers so accumulation from several calls stays in
        // the public grad buffers only.
        let n = self.nodes.len();
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; n];
        upstream[loss.0] = Some(vec![1.0]);
        self.add_grad(loss, &[1.0]);

        for k in (0..=loss.0).rev() {
            if !self.nodes[k].requires_grad {
                continue;
            }
            let g = match upstream[k].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[k].op.clone();
            let mut send = |tape: &mut Tape, t: Tensor, contrib: Vec<f64>| {
                if !tape.nodes[t.0].requires_grad {
                    return;
                }
                tape.add_grad(t, &contrib);
                match &mut upstream[t.0] {
                    Some(u) => {
                        for (ui, ci) in u.iter_mut().zip(&contrib) {
                            *ui += ci;
                        }
                    }
                    None => upstream[t.0] = Some(contrib),
                }
            };
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k: kk, n } => {
                    let av = self.value(a).to_vec();
                    let bv = self.value(b).to_vec();
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * kk];
                    for i in 0..m {
                        for p in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * kk + p] = s;
                        }
                    }
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; kk * n];
                    for p in 0..kk {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * kk + p] * g[i * n + j];
                            }
                            db[p * n + j] = s;
                        }
                    }
                    send(self, a, da);
                    send(self, b, db);
                }
                Op::Transpose { x, rows, cols } => {
                    // out is [cols×rows]; un-transpose the upstream.
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    send(self, x, dx);
                }
                Op::Reshape { x } => send(self, x, g.clone()),
                Op::Add { a, b } => {
                    send(self, a, g.clone());
                    send(self, b, g.clone());
                }
                Op::Sub { a, b } => {
                    send(self, a, g.clone());
                    send(self, b, g.iter().map(|v| -v).collect());
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(gi, bi)| gi * bi).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(gi, ai)| gi * ai).collect();
                    send(self, a, da);
                    send(self, b, db);
                }
                Op::Scale { x, c } => send(self, x, g.iter().map(|v| v * c).collect()),
                Op::AddRowBroadcast { x, v, rows, cols } => {
                    send(self, x, g.clone());
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += g[r * cols + c];
                        }
                    }
                    send(self, v, dv);
                }
                Op::DivRows { x, v, rows, cols } => {
                    let xv = self.value(x).to_vec();
                    let vv = self.value(v).to_vec();
                    let mut dx = vec![0.0; rows * cols];
                    let mut dv = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g[r * cols + c];
                            dx[r * cols + c] = gi / vv[r];
                            dv[r] -= gi * xv[r * cols + c] / (vv[r] * vv[r]);
                        }
                    }
                    send(self, x, dx);
                    send(self, v, dv);
                }
                Op::Exp { x } => {
                    let out = self.nodes[k].value.clone();
                    send(self, x, g.iter().zip(&out).map(|(gi, oi)| gi * oi).collect());
                }
                Op::Log { x } => {
                    let xv = self.value(x).to_vec();
                    send(self, x, g.iter().zip(&xv).map(|(gi, xi)| gi / xi).collect());
                }
                Op::Tanh { x } => {
                    let out = self.nodes[k].value.clone();
                    send(self, x, g.iter().zip(&out).map(|(gi, oi)| gi * (1.0 - oi * oi)).collect());
                }
                Op::SumAll { x } => {
                    let n = self.value(x).len();
                    send(self, x, vec![g[0]; n]);
                }
                Op::RowSum { x, rows, cols } => {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[r];
                        }
                    }
                    send(self, x, dx);
                }
                Op::RowMin { x, ref arg, cols } | Op::RowMax { x, ref arg, cols } => {
                    let rows = arg.len();
                    let mut dx = vec![0.0; rows * cols];
                    for (r, &c) in arg.iter().enumerate() {
                        dx[r * cols + c] = g[r];
                    }
                    send(self, x, dx);
                }
                Op::MinMaxRows { x, ref imin, ref imax, rows, cols } => {
                    let xv = self.value(x).to_vec();
                    let out = self.nodes[k].value.clone();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let lo = imin[r];
                        let hi = imax[r];
                        if lo == hi {
                            // Constant row: output pinned at 1, zero gradient.
                            continue;
                        }
                        let range = xv[r * cols + hi] - xv[r * cols + lo];
                        let gsum: f64 = (0..cols).map(|c| g[r * cols + c]).sum();
                        let gdot: f64 = (0..cols).map(|c| g[r * cols + c] * out[r * cols + c]).sum();
                        for c in 0..cols {
                            dx[r * cols + c] += g[r * cols + c] / range;
                        }
                        // min channel: d out_k / d x_lo = (out_k - 1) / range
                        dx[r * cols + lo] += (gdot - gsum) / range;
                        // max channel: d out_k / d x_hi = -out_k / range
                        dx[r * cols + hi] -= gdot / range;
                    }
                    send(self, x, dx);
                }
                Op::RowSoftmax { x, ref mask, rows, cols } => {
                    let out = self.nodes[k].value.clone();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let live = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
                        let mut s = 0.0;
                        for c in 0..cols {
                            if live(c) {
                                s += g[r * cols + c] * out[r * cols + c];
                            }
                        }
                        for c in 0..cols {
                            if live(c) {
                                dx[r * cols + c] = out[r * cols + c] * (g[r * cols + c] - s);
                            }
                        }
                    }
                    send(self, x, dx);
                }
                Op::L2NormalizeRows { x, eps, rows, cols } => {
                    let xv = self.value(x).to_vec();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                        let denom = norm + eps;
                        let gd: f64 = (0..cols).map(|c| g[r * cols + c] * row[c]).sum();
                        for c in 0..cols {
                            let mut d = g[r * cols + c] / denom;
                            if norm > 0.0 {
                                d -= gd * row[c] / (norm * denom * denom);
                            }
                            dx[r * cols + c] = d;
                        }
                    }
                    send(self, x, dx);
                }
                Op::MulMask { x, ref mask } => {
                    send(self, x, g.iter().zip(mask).map(|(gi, mi)| gi * mi).collect());
                }
                Op::GatherRows { x, ref idx, cols } => {
                    let n = self.value(x).len();
                    let mut dx = vec![0.0; n];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] += g[r * cols + c];
                        }
                    }
                    send(self, x, dx);
                }
                Op::ScatterRows { x, ref idx, cols } => {
                    let mut dx = vec![0.0; idx.len() * cols];
                    for (r, &i) in idx.iter().enumerate() {
                        dx[r * cols..(r + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    send(self, x, dx);
                }
                Op::ConcatRows { ref xs, cols } => {
                    let mut offset = 0;
                    for &t in xs {
                        let r = self.shape(t)[0];
                        let slice = g[offset * cols..(offset + r) * cols].to_vec();
                        send(self, t, slice);
                        offset += r;
                    }
                }
                Op::StackRows { ref xs, cols } => {
                    for (r, &t) in xs.iter().enumerate() {
                        send(self, t, g[r * cols..(r + 1) * cols].to_vec());
                    }
                }
                Op::TakeDiag { x, n } => {
                    let mut dx = vec![0.0; n * n];
                    for i in 0..n {
                        dx[i * n + i] = g[i];
                    }
                    send(self, x, dx);
                }
                Op::Dot { a, b } => {
                    let da: Vec<f64> = self.value(b).iter().map(|v| v * g[0]).collect();
                    let db: Vec<f64> = self.value(a).iter().map(|v| v * g[0]).collect();
                    send(self, a, da);
                    send(self, b, db);
                }
                Op::WeightedRowSum { x, ref w, rows, cols } => {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = w[r] * g[c];
                        }
                    }
                    send(self, x, dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut t = Tape::new();
        let eye = t.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = t.constant(&[3, 3], vec![5., -2., 0.5, 3., 7., 1., -1., 4., 9.]).unwrap();
        let out = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(out), t.value(m));
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = t.constant(&[2, 1], vec![1., 1.]).unwrap();
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.; 6]).unwrap();
        let b = t.constant(&[2, 2], vec![0.; 4]).unwrap();
        match t.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 2], vec![0., 0.]).unwrap();
        let y = t.row_softmax(x, None).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_live_entry() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 2], vec![3.7, 100.0]).unwrap();
        let y = t.row_softmax(x, Some(&[true, false])).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let r = t.row_softmax(x, Some(&[true, true, false, false]));
        assert_eq!(r, Err(Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let mut t = Tape::new();
        let data = vec![0.3, -1.2, 2.0, 0.7, -0.5, 0.1, 1.4, -2.2, 0.9, 0.0, -0.3, 1.1];
        let x = t.constant(&[3, 4], data.clone()).unwrap();
        let y = t.row_softmax(x, None).unwrap();
        for r in 0..3 {
            let row = &data[r * 4..(r + 1) * 4];
            let denom: f64 = row.iter().map(|&v| libm::exp(v)).sum();
            for c in 0..4 {
                let expect = libm::exp(row[c]) / denom;
                assert!(close(t.value(y)[r * 4 + c], expect, 1e-12));
            }
        }
    }

    #[test]
    fn l2_normalize_forced_arithmetic() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![3., 4.]).unwrap();
        let y = t.l2_normalize_rows(x, 1e-8).unwrap();
        assert!(close(t.value(y)[0], 0.6, 1e-8));
        assert!(close(t.value(y)[1], 0.8, 1e-8));
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![0., 0., 0.]).unwrap();
        let y = t.l2_normalize_rows(x, 1e-8).unwrap();
        assert_eq!(t.value(y), &[0., 0., 0.]);
    }

    #[test]
    fn minmax_rows_forced_and_constant() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3], vec![1., 2., 3., 5., 5., 5.]).unwrap();
        let y = t.minmax_rows(x).unwrap();
        assert_eq!(t.value(y), &[0., 0.5, 1., 1., 1., 1.]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&[2, 3], vec![0.1; 6], true).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_zero_times_x_is_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(&[4], vec![1., 2., 3., 4.], true).unwrap();
        let z = t.scale(x, 0.0);
        let s = t.sum_all(z);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1., 2.], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(&[3], vec![1., 1., 1.], true).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn off_path_tensor_has_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1., 2.], true).unwrap();
        let y = t.leaf(&[2], vec![3., 4.], true).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad_or_zeros(y), vec![0.0, 0.0]);
    }

    #[test]
    fn gather_then_scatter_round_trip() {
        let mut t = Tape::new();
        let x = t.constant(&[4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let g = t.gather_rows(x, &[1, 3]).unwrap();
        assert_eq!(t.value(g), &[3., 4., 7., 8.]);
        let s = t.scatter_rows(g, &[1, 3], 4).unwrap();
        assert_eq!(t.value(s), &[0., 0., 3., 4., 0., 0., 7., 8.]);
    }

    #[test]
    fn forward_values_are_reproducible() {
        let build = || {
            let mut t = Tape::new();
            let x = t.constant(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
            let e = t.exp(x);
            let s = t.row_softmax(e, None).unwrap();
            let m = t.mean_all(s);
            t.scalar_value(m).to_bits()
        };
        assert_eq!(build(), build());
    }
}
