//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! Every forward pass records its operations on a fresh [`Graph`]. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] simply walks it in reverse.
//!
//! Tensors are row-major. Most ops treat a tensor as a matrix whose column
//! count is the last dimension and whose row count is the product of the
//! remaining dimensions; a 1-D tensor is a single row.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by the normalizers.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Epsilon added to the variance inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(1.0);
        t
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Gaussian samples with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite");
        for v in &mut t.data {
            *v = normal.sample(rng);
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as a `rows x cols` matrix.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Row `i` of the matrix view.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Plain value copy without gradient state.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax { x: Var, mask: Option<Vec<bool>> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are only ever appended, which keeps the graph
/// acyclic and the node list in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes the
/// stored row-major operand. Logical shapes are `m x k` and `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches
    // given these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op,
            detail: format!("non-finite input {} at index {pos}", data[pos]),
        });
    }
    Ok(())
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

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.push(value, Op::Leaf, rg)
    }

    /// Records a copy of `t` as a leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.detached().with_requires_grad(t.requires_grad))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.node(v).value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by the last backward pass. `None` for nodes that
    /// do not require gradient or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Matrix product of the matrix views of `a` (`m x k`) and `b` (`k x n`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.shape.len() > 2 || bv.shape.len() > 2 {
            return Err(Error::shape("matmul", &av.shape, &bv.shape));
        }
        let (m, ka) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (kb, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if ka != kb {
            return Err(Error::shape("matmul", &av.shape, &bv.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, &av.data, ta, &bv.data, tb, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape.clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds `bias` (width = last axis of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x).value, &self.node(bias).value);
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::shape("add_row", &xv.shape, &bv.shape));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&bv.data).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(xv.shape.clone(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.node(x).value;
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * c).collect(),
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.node(x).value;
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax along `axis`. The last axis is handled directly; axis 0 of a
    /// matrix goes through a transpose.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ndim = self.shape(x).len();
        if axis + 1 == ndim {
            self.softmax_rows(x)
        } else if ndim == 2 && axis == 0 {
            let t = self.transpose(x)?;
            let s = self.softmax_rows(t)?;
            self.transpose(s)
        } else {
            Err(Error::shape("softmax", self.shape(x), &[axis]))
        }
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x).value;
        check_finite("softmax", &xv.data)?;
        let c = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(xv.shape.clone(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis. With a mask, entries whose mask bit is
    /// false are excluded from the normalizer and produce 0 with no gradient.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let xv = &self.node(x).value;
        check_finite("log_softmax", &xv.data)?;
        if let Some(m) = &mask {
            if m.len() != xv.numel() {
                return Err(Error::shape("log_softmax mask", &xv.shape, &[m.len()]));
            }
        }
        let c = xv.cols();
        let mut data = xv.data.clone();
        for (r, row) in data.chunks_mut(c).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric {
                    op: "log_softmax",
                    detail: format!("row {r} has no unmasked entries"),
                });
            }
            let lse = max
                + (0..c)
                    .filter(|&j| keep(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { *v - lse } else { 0.0 };
            }
        }
        let t = Tensor::new(xv.shape.clone(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, mask }, rg))
    }

    /// Row-wise layer norm over the last axis followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (&self.node(x).value, &self.node(gain).value, &self.node(bias).value);
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("layer_norm", &xv.shape, &gv.shape));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let t = Tensor::new(xv.shape.clone(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x).value;
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n >= DEGENERATE_NORM) {
                return Err(Error::DegenerateVector("l2_normalize"));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(xv.shape.clone(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x).value;
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &xv.shape, &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data[r * c + start..r * c + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x).value;
        let c = xv.cols();
        if len == 0 || start + len > xv.rows() {
            return Err(Error::shape("slice_rows", &xv.shape, &[start, len]));
        }
        let data = xv.data[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", &[], &[]))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        let t = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x).value;
        if xv.shape.len() > 2 {
            return Err(Error::shape("transpose", &xv.shape, &[]));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.node(x).value.detached().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.node(x).value;
        let s = xv.data.iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse-mode pass from a scalar `loss`. Gradients are stored on every
    /// node that requires them; nodes that do not require gradient get none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let lv = &self.node(loss).value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        self.backward_done = true;
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut finished: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            finished.push((i, g));
        }
        for (i, g) in finished {
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (out.shape[0], out.shape[1]);
                let k = if *ta { av.rows() } else { av.cols() };
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    if !*ta {
                        // dA = dC * op(B)^T
                        gemm(m, n, k, g, false, &bv.data, !*tb, 0.0, &mut da);
                    } else {
                        // stored A is k x m: dA = op(B) * dC^T
                        gemm(k, n, m, &bv.data, *tb, g, true, 0.0, &mut da);
                    }
                    acc(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    if !*tb {
                        // dB = op(A)^T * dC
                        gemm(k, m, n, &av.data, !*ta, g, false, 0.0, &mut db);
                    } else {
                        // stored B is n x k: dB = dC^T * op(A)
                        gemm(n, m, k, g, true, &av.data, *ta, 0.0, &mut db);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, g.iter().zip(&bv.data).map(|(g, y)| g * y).collect());
                acc(grads, *b, g.iter().zip(&av.data).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(x, bias) => {
                acc(grads, *x, g.to_vec());
                let c = out.cols();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(grads, *bias, db);
            }
            Op::Scale(x, c) => acc(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(grads, *x, g.iter().zip(&xv.data).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(
                    grads,
                    *x,
                    g.iter().zip(&xv.data).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmax { x, mask } => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| g[r * c + j]).sum();
                    for j in (0..c).filter(|&j| keep(j)) {
                        let p = out.data[r * c + j].exp();
                        dx[r * c + j] = g[r * c + j] - p * gsum;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gv = val(*gain);
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv.data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv.data[j];
                        dx[r * c + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::L2Normalize { x, norms } => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &out.data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, len) = (xv.cols(), out.cols());
                let mut dx = vec![0.0; xv.numel()];
                for (r, gr) in g.chunks(len).enumerate() {
                    dx[r * c + start..r * c + start + len].copy_from_slice(gr);
                }
                acc(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let dp: Vec<f64> = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    acc(grads, *p, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    acc(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut dx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Sum(x) => acc(grads, *x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(grads, *x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

/// Unit-norm copy of a plain vector.
pub fn l2_normalize_vec(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateVector("l2_normalize"));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub passed: bool,
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares the autodiff gradient of `f` at `x` against central differences
/// `(f(x+he) - f(x-he)) / 2h`. Mismatches are reported, not raised.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::config(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.detached().with_requires_grad(true));
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.detached();
        plus.data_mut()[i] += step;
        let mut minus = x.detached();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }

    let mut max_rel_error = 0.0;
    let mut max_abs_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(*a, *n);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        max_abs_error = f64::max(max_abs_error, (a - n).abs());
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
        worst_index,
        passed: max_rel_error <= tol,
    })
}
