//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation as a node that owns its (immutable)
//! value. Node ids are handed out in creation order, so the node list is
//! already a topological order and [`Graph::backward`] simply walks it in
//! reverse. Leaves created with `requires_grad = false` never receive a
//! gradient and, more importantly, the backward rules skip the work needed
//! to produce one: frozen weights cost nothing beyond the forward pass.
//!
//! Only the leading (row) dimension broadcasts, and only in [`Graph::add`].

use std::cell::Cell;
use std::sync::Arc;

use thiserror::Error;

/// Errors raised by tensor construction, graph operations and gradient checks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the forward pass first")]
    AlreadyBackpropagated,
    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),
    #[error("function is not deterministic: baseline evaluations {0} and {1} differ")]
    NonDeterministic(f64, f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix: everything but the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Plain (non-differentiable) matrix product, used outside of graphs.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = as_matrix(other, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (&self.data, k, 1),
            (&other.data, n, 1),
            &mut out,
            0.0,
        );
        Tensor::new(&[m, n], out)
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        [c] => Ok((1, c)),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a matrix, got shape {:?}", t.shape()),
        }),
    }
}

/// `c = a·b + beta·c` for strided operands; `a` is m×k and `b` is k×n.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.0.len() > (m - 1) * a.1 + (k - 1) * a.2);
    debug_assert!(k == 0 || n == 0 || b.0.len() > (k - 1) * b.1 + (n - 1) * b.2);
    // SAFETY: the debug assertions above spell out the bounds every caller
    // guarantees through the shape checks of the enclosing op.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Concat { parts: Vec<Var> },
    Softmax { a: Var },
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    Gelu { a: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Segment { a: Var, offset: usize },
    Reshape { a: Var },
    Sum { a: Var },
    SumScalars { parts: Vec<Var>, factor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    checked_finite: Cell<bool>,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar loss with respect to the graph's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad = true`. Leaves that the
    /// loss does not depend on get an all-zero tensor.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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
        self.push_arc(Arc::new(value), op, requires_grad, false)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool, checked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            checked_finite: Cell::new(checked),
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push_arc(value.into(), Op::Leaf, true, false)
    }

    /// Frozen leaf; shares storage with the caller when given an `Arc`.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.push_arc(value.into(), Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_finite(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for &v in vars {
            let node = &self.nodes[v.0];
            if node.checked_finite.get() {
                continue;
            }
            if !node.value.is_finite() {
                return Err(TensorError::NonFinite { op });
            }
            node.checked_finite.set(true);
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Matrix product of an m×k and a k×n matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for an m×k `a` and an n×k `b`; the usual `x W0ᵀ` of a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let op = "matmul";
        let (m, k) = as_matrix(self.value(a), op)?;
        let (br, bc) = as_matrix(self.value(b), op)?;
        let (k2, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.mismatch(op, a, b));
        }
        self.check_finite(op, &[a, b])?;
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let bs = if b_transposed { (bv, 1, k) } else { (bv, n, 1) };
            gemm(m, k, n, (av, k, 1), bs, &mut out, 0.0);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b, b_transposed },
            rg,
        ))
    }

    /// Elementwise sum. `b` may also be a vector matching the last dimension
    /// of `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = "add";
        let broadcast = if self.shape(a) == self.shape(b) {
            false
        } else if self.shape(b).len() == 1 && self.value(a).cols() == self.value(b).len() {
            true
        } else {
            return Err(self.mismatch(op, a, b));
        };
        self.check_finite(op, &[a, b])?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        if broadcast {
            for row in out.chunks_mut(bv.len()) {
                for (o, &x) in row.iter_mut().zip(bv) {
                    *o += x;
                }
            }
        } else {
            for (o, &x) in out.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a, b, broadcast }, rg))
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = "mul";
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        self.check_finite(op, &[a, b])?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let op = "scale";
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.check_finite(op, &[a])?;
        let v = self.value(a);
        let out: Vec<f64> = v.data().iter().map(|x| x * factor).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale { a, factor }, rg))
    }

    /// Concatenation along the last dimension; all parts share their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let op = "concat";
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op,
                msg: "nothing to concatenate".into(),
            });
        };
        let rows = self.value(first).rows();
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in &parts[1..] {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(self.mismatch(op, first, p));
            }
        }
        self.check_finite(op, parts)?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", &[a])?;
        let v = self.value(a);
        let c = v.cols();
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, rg))
    }

    /// Root-mean-square normalisation of each row, times a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let op = "rms_norm";
        let c = self.value(x).cols();
        if self.shape(gain) != [c] {
            return Err(self.mismatch(op, x, gain));
        }
        self.check_finite(op, &[x, gain])?;
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, &v), &gi) in o.iter_mut().zip(row).zip(g) {
                *o = v * inv * gi;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RmsNorm { x, gain, eps }, rg))
    }

    /// Gathers rows `ids` of a 2-D table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let op = "embedding_lookup";
        let t = self.value(table);
        let (n, d) = as_matrix(t, op)?;
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op,
                msg: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op,
                msg: format!("id {bad} out of range for table with {n} rows"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_finite("gelu", &[a])?;
        let v = self.value(a);
        let out: Vec<f64> = v.data().iter().map(|&x| gelu(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gelu { a }, rg))
    }

    /// Mean next-token cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let op = "cross_entropy";
        let lv = self.value(logits);
        let (rows, vocab) = as_matrix(lv, op)?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op,
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(TensorError::Invalid {
                op,
                msg: format!("target {bad} outside vocabulary of {vocab}"),
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op,
                msg: "no target positions".into(),
            });
        }
        self.check_finite(op, &[logits])?;
        let lv = self.value(logits);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(r);
                total += log_sum_exp(row) - row[t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over `[seq, d_model]` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let op = "attention";
        if self.shape(q) != self.shape(k) {
            return Err(self.mismatch(op, q, k));
        }
        if self.shape(q) != self.shape(v) {
            return Err(self.mismatch(op, q, v));
        }
        let (t, d) = as_matrix(self.value(q), op)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("{d} columns cannot be split into {heads} heads"),
            });
        }
        self.check_finite(op, &[q, k, v])?;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                }
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                softmax_into(&scores[..=i], p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in p.iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&[t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// A contiguous run of the flat data of `a`, starting at `offset`,
    /// viewed with `shape`. Used to cut generated parameter vectors into
    /// factor matrices.
    pub fn segment(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let op = "segment";
        let n: usize = shape.iter().product();
        let total = self.value(a).len();
        if n == 0 || offset + n > total {
            return Err(TensorError::Invalid {
                op,
                msg: format!("range {offset}..{} outside {total} elements", offset + n),
            });
        }
        self.check_finite(op, &[a])?;
        let out = self.value(a).data()[offset..offset + n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Segment { a, offset }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite("sum", &[a])?;
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// Mean of several one-element tensors.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let op = "mean";
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op,
                msg: "nothing to average".into(),
            });
        }
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(TensorError::NotScalar(self.shape(p).to_vec()));
            }
        }
        self.check_finite(op, parts)?;
        let factor = 1.0 / parts.len() as f64;
        let s: f64 = parts.iter().map(|&p| self.value(p).item()).sum::<f64>() * factor;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::scalar(s),
            Op::SumScalars {
                parts: parts.to_vec(),
                factor,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each graph supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                self.slot(grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (a, b) = (*a, *b);
                let (m, k) = as_matrix(val(a), "matmul").expect("checked in forward");
                let n = node.value.cols();
                if wants(a) {
                    // dA = dC · Bᵀ
                    let bv = val(b).data();
                    let bs = if *b_transposed { (bv, k, 1) } else { (bv, 1, n) };
                    gemm(m, n, k, (g, n, 1), bs, acc!(a), 1.0);
                }
                if wants(b) {
                    let av = val(a).data();
                    if *b_transposed {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, (g, 1, n), (av, k, 1), acc!(b), 1.0);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, (av, 1, k), (g, n, 1), acc!(b), 1.0);
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    if *broadcast {
                        for row in g.chunks(gb.len()) {
                            for (o, &x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    } else {
                        for (o, &x) in gb.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = val(*b).data();
                    for ((o, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    for ((o, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale { a, factor } => {
                for (o, &x) in acc!(*a).iter_mut().zip(g) {
                    *o += x * factor;
                }
            }
            Op::Concat { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..rows {
                            let src = &g[r * total + col..r * total + col + w];
                            for (o, &x) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = node.value.cols();
                let ga = acc!(*a);
                for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let c = gv.len();
                let mut dgain = vec![0.0; c];
                let mut dx = wants(*x).then(|| vec![0.0; xv.len()]);
                for (r, (xr, gr)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut dot = 0.0;
                    for i in 0..c {
                        let xhat = xr[i] * inv;
                        dgain[i] += gr[i] * xhat;
                        dot += gr[i] * gv[i] * xhat;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mean = dot / c as f64;
                        for i in 0..c {
                            dx[r * c + i] = inv * (gr[i] * gv[i] - xr[i] * inv * mean);
                        }
                    }
                }
                if let Some(dx) = dx {
                    for (o, v) in acc!(*x).iter_mut().zip(dx) {
                        *o += v;
                    }
                }
                if wants(*gain) {
                    for (o, v) in acc!(*gain).iter_mut().zip(dgain) {
                        *o += v;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                let gt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
            }
            Op::Gelu { a } => {
                let av = val(*a).data();
                for ((o, &x), &gi) in acc!(*a).iter_mut().zip(av).zip(g) {
                    *o += gi * gelu_grad(x);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let count = targets.iter().flatten().count() as f64;
                let scale = g[0] / count;
                let gl = acc!(*logits);
                let mut p = vec![0.0; vocab];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        softmax_into(lv.row(r), &mut p);
                        p[t] -= 1.0;
                        for (o, &pi) in gl[r * vocab..(r + 1) * vocab].iter_mut().zip(&p) {
                            *o += scale * pi;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(node, (*q, *k, *v), *heads, probs, g, grads),
            Op::Segment { a, offset } => {
                let ga = acc!(*a);
                for (o, &x) in ga[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *o += x;
                }
            }
            Op::Reshape { a } => {
                for (o, &x) in acc!(*a).iter_mut().zip(g) {
                    *o += x;
                }
            }
            Op::Sum { a } => {
                for o in acc!(*a).iter_mut() {
                    *o += g[0];
                }
            }
            Op::SumScalars { parts, factor } => {
                for &p in parts {
                    if wants(p) {
                        acc!(p)[0] += g[0] * factor;
                    }
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use. The gradient being
    /// propagated has already been taken out of `grads`, so this never aliases it.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn attention_backward(
        &self,
        node: &Node,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = (node.value.rows(), node.value.cols());
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for (j, &pij) in p.iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += pij * dp[j];
                    for (o, &x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *o += pij * x;
                    }
                }
                for (j, &pij) in p.iter().enumerate() {
                    let ds = pij * (dp[j] - dot) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kv[j * d + off + c];
                        dk[j * d + off + c] += ds * qv[i * d + off + c];
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                for (o, x) in self.slot(grads, var).iter_mut().zip(local) {
                    *o += x;
                }
            }
        }
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
}

/// Compares an analytic gradient against central differences.
///
/// `f` maps a parameter vector to `(loss, gradient)`. Only the gradient of
/// the unperturbed evaluation is used. The relative error at coordinate `i`
/// is `|analytic - central| / (|analytic| + |central| + 1e-12)`; the report
/// carries the maximum over `coords` (all coordinates when `None`).
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::InvalidStep(eps));
    }
    let (base, analytic) = f(params)?;
    let (again, _) = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(base, again));
    }
    if analytic.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "finite_difference_check",
            left: vec![params.len()],
            right: vec![analytic.len()],
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coordinate: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
    };
    for &i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let (plus, _) = f(&work)?;
        work[i] = orig - eps;
        let (minus, _) = f(&work)?;
        work[i] = orig;
        let central = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    /// Builds a scalar from the leaves via `build`, and checks the gradient
    /// of every leaf coordinate against central differences.
    fn check_op<B>(leaves: Vec<Tensor>, build: B) -> f64
    where
        B: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let sizes: Vec<usize> = leaves.iter().map(|t| t.len()).collect();
        let shapes: Vec<Vec<usize>> = leaves.iter().map(|t| t.shape().to_vec()).collect();
        let flat: Vec<f64> = leaves.iter().flat_map(|t| t.data().to_vec()).collect();
        let eval = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let mut vars = Vec::new();
            let mut off = 0;
            for (s, shape) in sizes.iter().zip(&shapes) {
                vars.push(g.param(Tensor::new(shape, p[off..off + s].to_vec())?));
                off += s;
            }
            let out = build(&mut g, &vars)?;
            let loss = g.value(out).item();
            let grads = g.backward(out)?;
            let flat = vars
                .iter()
                .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
                .collect();
            Ok((loss, flat))
        };
        finite_difference_check(eval, &flat, 1e-5, None)
            .unwrap()
            .max_rel_error
    }

    /// Random projection to a scalar so every output coordinate matters.
    fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.shape(x));
        let w = g.constant(w);
        let m = g.mul(x, w)?;
        g.sum(m)
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_tensor(&mut rng, &[3, 3]);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_cross_entropy_is_zero() {
        let mut g = Graph::new();
        let mut logits = Tensor::zeros(&[1, 5]);
        logits.data_mut()[2] = 1e9;
        let l = g.constant(logits);
        let ce = g.cross_entropy(l, &[Some(2)]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-9);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.param(Tensor::new(&[2], vec![5.0, 6.0]).unwrap());
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let w = g.param(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let m = g.mul(x, w).unwrap();
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::AlreadyBackpropagated);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap());
        assert_eq!(g.gelu(a).unwrap_err(), TensorError::NonFinite { op: "gelu" });
    }

    #[test]
    fn cross_entropy_without_targets_is_an_error() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.cross_entropy(l, &[None, None]).is_err());
    }

    #[test]
    fn fd_check_on_square() {
        let f = |p: &[f64]| Ok((p[0] * p[0], vec![2.0 * p[0]]));
        let r = finite_difference_check(f, &[3.0], 1e-5, None).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn fd_check_rejects_bad_step_and_nondeterminism() {
        let f = |p: &[f64]| Ok((p[0], vec![1.0]));
        assert_eq!(
            finite_difference_check(f, &[1.0], 0.0, None).unwrap_err(),
            TensorError::InvalidStep(0.0)
        );
        let mut calls = 0.0;
        let g = |p: &[f64]| {
            calls += 1.0;
            Ok((p[0] + calls, vec![1.0]))
        };
        assert!(matches!(
            finite_difference_check(g, &[1.0], 1e-5, None),
            Err(TensorError::NonDeterministic(..))
        ));
    }

    #[test]
    fn cross_entropy_of_linear_map_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let err = check_op(vec![w, x], |g, v| {
            let logits = g.matmul_t(v[1], v[0])?;
            g.cross_entropy(logits, &[Some(1), None, Some(4)])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check_op(vec![r(&[3, 4]), r(&[4, 2])], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 1)
            })),
            ("matmul_t", check_op(vec![r(&[3, 4]), r(&[5, 4])], |g, v| {
                let y = g.matmul_t(v[0], v[1])?;
                project(g, y, 2)
            })),
            ("add", check_op(vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 3)
            })),
            ("add_row", check_op(vec![r(&[3, 4]), r(&[4])], |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 4)
            })),
            ("concat", check_op(vec![r(&[2, 3]), r(&[2, 2])], |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                project(g, y, 5)
            })),
            ("softmax", check_op(vec![r(&[2, 5])], |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, 6)
            })),
            ("rms_norm", check_op(vec![r(&[3, 4]), r(&[4])], |g, v| {
                let y = g.rms_norm(v[0], v[1], 1e-6)?;
                project(g, y, 7)
            })),
            ("embedding", check_op(vec![r(&[4, 3])], |g, v| {
                let y = g.embedding(v[0], &[2, 0, 2])?;
                project(g, y, 8)
            })),
            ("gelu", check_op(vec![r(&[2, 3])], |g, v| {
                let y = g.gelu(v[0])?;
                project(g, y, 9)
            })),
            ("cross_entropy", check_op(vec![r(&[3, 6])], |g, v| {
                g.cross_entropy(v[0], &[Some(0), Some(5), None])
            })),
            ("attention", check_op(vec![r(&[4, 6]), r(&[4, 6]), r(&[4, 6])], |g, v| {
                let y = g.causal_attention(v[0], v[1], v[2], 2)?;
                project(g, y, 10)
            })),
            ("segment", check_op(vec![r(&[2, 6])], |g, v| {
                let y = g.segment(v[0], 3, &[2, 3])?;
                project(g, y, 11)
            })),
            ("scale_mean", check_op(vec![r(&[2]), r(&[3])], |g, v| {
                let a = g.sum(v[0])?;
                let b = g.sum(v[1])?;
                let m = g.mean_scalars(&[a, b])?;
                g.scale(m, -1.5)
            })),
        ];
        for (name, err) in cases {
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, &[4, 4]);
        let k = rand_tensor(&mut rng, &[4, 4]);
        let v = rand_tensor(&mut rng, &[4, 4]);
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (qa, ka, va) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.causal_attention(qa, ka, va, 2).unwrap();
            g.value(o).clone()
        };
        let base = run(&k, &v);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for c in 0..4 {
            k2.data_mut()[3 * 4 + c] += 1.0;
            v2.data_mut()[3 * 4 + c] -= 1.0;
        }
        let changed = run(&k2, &v2);
        assert_eq!(&base.data()[..12], &changed.data()[..12]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let run = || {
            let mut g = Graph::new();
            let (av, bv) = (g.param(a.clone()), g.param(b.clone()));
            let y = g.matmul(av, bv).unwrap();
            let y = g.gelu(y).unwrap();
            let l = g.cross_entropy(y, &[Some(0), Some(1), Some(2), None]).unwrap();
            let gr = g.backward(l).unwrap();
            (gr.get(av).unwrap().clone(), gr.get(bv).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
                let n = xs.len();
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(&[n], xs).unwrap());
                let y = g.softmax(x).unwrap();
                let s: f64 = g.value(y).data().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(g.value(y).data().iter().all(|&p| p > 0.0));
            }
        }
    }
}
