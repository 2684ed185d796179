//! Dense f64 tensors with a tape-based reverse-mode autodiff graph.
//!
//! Values live in a [`Graph`] arena and are addressed by [`Var`] handles.
//! Leaves created with [`Graph::param`] collect gradients on [`Graph::backward`];
//! constants never do. Gradients accumulate until [`Graph::zero_grad`].

use std::sync::Arc;

use thiserror::Error;

pub const LOG_FLOOR: f64 = 1e-30;
pub const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("rank error in {op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("degenerate vector in {op}: norm {norm:e} is below {NORM_EPS:e}")]
    Degenerate { op: &'static str, norm: f64 },
    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![], vec![v]).expect("scalar shape")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector shape")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros shape")
    }

    /// Marks the tensor learnable and allocates a zeroed gradient store.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Returns a copy with one coordinate shifted; used by finite differences.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut t = Self::new(self.shape.clone(), self.data.clone()).expect("same shape");
        t.data[index] += delta;
        t
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn expect_vector(&self, op: &'static str) -> Result<usize> {
        if self.shape.len() != 1 {
            return Err(TensorError::Rank {
                op,
                expected: 1,
                shape: self.shape.clone(),
            });
        }
        Ok(self.shape[0])
    }
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let grad = (0..x.len())
        .map(|i| (f(&x.perturbed(i, h)) - f(&x.perturbed(i, -h))) / (2.0 * h))
        .collect();
    Tensor::new(x.shape.clone(), grad).expect("same shape")
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// c[r×n] += a[r×k] · b[k×n]
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    for i in 0..r {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[r×k] += g[r×n] · b[k×n]ᵀ
fn gemm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], r: usize, n: usize, k: usize) {
    for i in 0..r {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

// c[k×n] += a[r×k]ᵀ · g[r×n]
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    for i in 0..r {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// Plain matrix product on row-major slices.
pub fn matmul_slices(a: &[f64], b: &[f64], r: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; r * n];
    gemm_acc(a, b, &mut c, r, k, n);
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    SegmentMean(Var, usize),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Pick(Var, usize),
    CosineRows(Var, Var),
    LayerNormRows(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered operation record; nodes are appended after their parents.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Learnable leaf: receives gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        let n = t.len();
        let mut t = t;
        t.requires_grad = true;
        t.grad = None;
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: true,
            grad: Some(vec![0.0; n]),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.constant_shared(Arc::new(t))
    }

    /// Constant leaf that shares storage with the caller (frozen weights).
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a learnable leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .filter(|_| matches!(node.op, Op::Leaf))
            .map(|g| Tensor::new(node.value.shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let (Op::Leaf, Some(g)) = (&n.op, &mut n.grad) {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape.clone(), data).expect("same shape");
        self.push(t, op, &[a, b])
    }

    fn unary_map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| f(*x)).collect())
            .expect("same shape");
        self.push(t, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = ta.expect_matrix("matmul")?;
        let (k2, n) = tb.expect_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = matmul_slices(&ta.data, &tb.data, r, k, n);
        Ok(self.push(Tensor::matrix(r, n, data)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    /// Adds a length-c vector to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, c) = ta.expect_matrix("add_row")?;
        let n = tr.expect_vector("add_row")?;
        if n != c {
            return Err(TensorError::Dimension {
                op: "add_row",
                left: ta.shape.clone(),
                right: tr.shape.clone(),
            });
        }
        let data = ta
            .data
            .chunks(c)
            .flat_map(|r| r.iter().zip(&tr.data).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        Ok(self.zip_map(Op::Hadamard(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary_map(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(Op::Exp(a), a, f64::exp)
    }

    /// Natural log with inputs floored at 1e-30.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary_map(Op::Log(a), a, |x| x.max(LOG_FLOOR).ln())
    }

    /// Row-wise softmax; a vector is treated as a single row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols().max(1);
        let data = ta.data.chunks(c).flat_map(softmax).collect();
        let t = Tensor::new(ta.shape.clone(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// Mean of the rows of an r×c matrix, giving a length-c vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.expect_matrix("mean_rows")?;
        let mut out = vec![0.0; c];
        for row in ta.data.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    /// Averages consecutive groups of `len` rows: (g·len)×c → g×c.
    pub fn segment_mean(&mut self, a: Var, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.expect_matrix("segment_mean")?;
        if len == 0 || r % len != 0 {
            return Err(TensorError::Dimension {
                op: "segment_mean",
                left: ta.shape.clone(),
                right: vec![len],
            });
        }
        let groups = r / len;
        let mut out = vec![0.0; groups * c];
        for (i, row) in ta.data.chunks(c).enumerate() {
            let o = &mut out[(i / len) * c..(i / len + 1) * c];
            o.iter_mut().zip(row).for_each(|(o, x)| *o += x / len as f64);
        }
        let t = Tensor::matrix(groups, c, out)?;
        Ok(self.push(t, Op::SegmentMean(a, len), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat_rows",
            expected: 2,
            shape: vec![],
        })?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rank() == 0 || t.rank() > 2 || t.cols() != c {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    left: self.value(*first).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            rows += if t.rank() == 1 { 1 } else { t.rows() };
            data.extend_from_slice(&t.data);
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat_cols",
            expected: 2,
            shape: vec![],
        })?;
        let (r, _) = self.value(*first).expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (pr, pc) = t.expect_matrix("concat_cols")?;
            if pr != r {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    left: self.value(*first).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.expect_matrix("slice_rows")?;
        if start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let t = Tensor::matrix(len, c, ta.data[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.expect_matrix("slice_cols")?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let data = ta
            .data
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::matrix(r, len, data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(a, i, 1)?;
        let d = self.value(r).cols();
        self.reshape(r, vec![d])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        let v = *ta.data.get(index).ok_or(TensorError::Index {
            op: "pick",
            index,
            extent: ta.len(),
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), &[a]))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).expect_vector("cosine")?;
        self.same_shape("cosine", a, b)?;
        let m = self.reshape(b, vec![1, n])?;
        let c = self.cosine_rows(a, m)?;
        self.reshape(c, vec![])
    }

    /// Cosine similarity of a vector against every row of a matrix.
    pub fn cosine_rows(&mut self, v: Var, m: Var) -> Result<Var> {
        let (tv, tm) = (self.value(v), self.value(m));
        let d = tv.expect_vector("cosine_rows")?;
        let (r, c) = tm.expect_matrix("cosine_rows")?;
        if c != d {
            return Err(TensorError::Dimension {
                op: "cosine_rows",
                left: tv.shape.clone(),
                right: tm.shape.clone(),
            });
        }
        let nv = norm(&tv.data);
        if nv < NORM_EPS {
            return Err(TensorError::Degenerate {
                op: "cosine",
                norm: nv,
            });
        }
        let mut out = Vec::with_capacity(r);
        for row in tm.data.chunks(c) {
            let nr = norm(row);
            if nr < NORM_EPS {
                return Err(TensorError::Degenerate {
                    op: "cosine",
                    norm: nr,
                });
            }
            out.push(dot(&tv.data, row) / (nv * nr));
        }
        Ok(self.push(Tensor::vector(out), Op::CosineRows(v, m), &[v, m]))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols().max(1);
        let data = ta
            .data
            .chunks(c)
            .flat_map(|row| {
                let (mu, inv) = row_stats(row);
                row.iter().map(move |x| (x - mu) * inv).collect::<Vec<_>>()
            })
            .collect();
        let t = Tensor::new(ta.shape.clone(), data).expect("same shape");
        self.push(t, Op::LayerNormRows(a), &[a])
    }

    /// Reverse sweep from a scalar loss; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.rank() != 0 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: 0,
                shape: lt.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if let Some(acc) = &mut self.nodes[idx].grad {
                    acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g);
                }
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| -> &Tensor { &self.nodes[v.0].value };
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (r, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if needs(a) {
                    acc(*a, &|s| gemm_nt_acc(g, &tb.data, s, r, n, k));
                }
                if needs(b) {
                    acc(*b, &|s| gemm_tn_acc(&ta.data, g, s, r, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &|s| add_into(s, g));
                let c = val(row).len();
                acc(*row, &|s| {
                    for gr in g.chunks(c) {
                        add_into(s, gr);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::Hadamard(a, b) => {
                let (ta, tb) = (val(a), val(b));
                acc(*a, &|s| {
                    for ((x, gv), bv) in s.iter_mut().zip(g).zip(&tb.data) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &|s| {
                    for ((x, gv), av) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += gv * av;
                    }
                });
            }
            Op::Relu(a) => {
                let ta = val(a);
                acc(*a, &|s| {
                    for ((x, gv), av) in s.iter_mut().zip(g).zip(&ta.data) {
                        if *av > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|s| {
                for ((x, gv), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *x += gv * y;
                }
            }),
            Op::Log(a) => {
                let ta = val(a);
                acc(*a, &|s| {
                    for ((x, gv), av) in s.iter_mut().zip(g).zip(&ta.data) {
                        if *av > LOG_FLOOR {
                            *x += gv / av;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                acc(*a, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let inner = dot(gr, yr);
                        for ((x, gv), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gv - inner);
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let ta = val(a);
                let (r, c) = (ta.shape[0], ta.shape[1]);
                acc(*a, &|s| {
                    for sr in s.chunks_mut(c) {
                        sr.iter_mut().zip(g).for_each(|(x, gv)| *x += gv / r as f64);
                    }
                });
            }
            Op::SegmentMean(a, len) => {
                let c = out.cols();
                acc(*a, &|s| {
                    for (i, sr) in s.chunks_mut(c).enumerate() {
                        let gr = &g[(i / len) * c..(i / len + 1) * c];
                        sr.iter_mut().zip(gr).for_each(|(x, gv)| *x += gv / *len as f64);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[1], out.shape[0]);
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    let gs = &g[offset..offset + n];
                    acc(*p, &|s| add_into(s, gs));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape[1];
                let mut col = 0;
                for p in parts {
                    let w = val(p).shape[1];
                    acc(*p, &|s| {
                        for (sr, gr) in s.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(sr, &gr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(*a, &|s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let c = val(a).shape[1];
                let w = out.shape[1];
                acc(*a, &|s| {
                    for (sr, gr) in s.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut sr[*start..start + w], gr);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Pick(a, i) => acc(*a, &|s| s[*i] += g[0]),
            Op::CosineRows(v, m) => {
                let (tv, tm) = (val(v), val(m));
                let d = tv.len();
                let nv = norm(&tv.data);
                acc(*v, &|s| {
                    for ((row, cj), gj) in tm.data.chunks(d).zip(&out.data).zip(g) {
                        let nr = norm(row);
                        for ((x, rv), vv) in s.iter_mut().zip(row).zip(&tv.data) {
                            *x += gj * (rv / (nv * nr) - cj * vv / (nv * nv));
                        }
                    }
                });
                acc(*m, &|s| {
                    for (((sr, row), cj), gj) in
                        s.chunks_mut(d).zip(tm.data.chunks(d)).zip(&out.data).zip(g)
                    {
                        let nr = norm(row);
                        for ((x, rv), vv) in sr.iter_mut().zip(row).zip(&tv.data) {
                            *x += gj * (vv / (nv * nr) - cj * rv / (nr * nr));
                        }
                    }
                });
            }
            Op::LayerNormRows(a) => {
                let ta = val(a);
                let c = ta.cols().max(1);
                acc(*a, &|s| {
                    for ((sr, gr), (xr, yr)) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(ta.data.chunks(c).zip(out.data.chunks(c)))
                    {
                        let (_, inv) = row_stats(xr);
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = dot(gr, yr) / c as f64;
                        for ((x, gv), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *x += inv * (gv - mg - y * mgy);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}
