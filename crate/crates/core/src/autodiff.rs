//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Values are
//! computed eagerly when an operation is recorded; [`Tape::backward`] walks
//! the record in reverse and accumulates adjoints. Nodes are appended in
//! evaluation order, so the record is topologically sorted by construction.
//!
//! ```
//! use srepa_core::autodiff::Tape;
//! use srepa_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.sum_all(sq);
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, numel, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Norm threshold below which a row is passed through unnormalized.
pub const NORMALIZE_EPS: f64 = 1e-8;
/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync>;

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    BatchedMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Activation(Var, Activation),
    Log(Var, T),
    Softmax(Var, T),
    L2Normalize(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reduce {
        x: Var,
        index_map: Vec<usize>,
        mean_divisor: Option<T>,
    },
    OffDiag(Var),
    GatherRows(Var, Vec<usize>),
    Expand(Var, usize),
    Custom(Var, CustomBackward<T>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MatMul(..) => "matmul",
            Op::BatchedMatMul { .. } => "batched_matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Activation(..) => "activation",
            Op::Log(..) => "log",
            Op::Softmax(..) => "row_softmax",
            Op::L2Normalize(..) => "row_l2_normalize",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { .. } => "reduce",
            Op::OffDiag(..) => "extract_offdiagonal",
            Op::GatherRows(..) => "gather_rows",
            Op::Expand(..) => "expand",
            Op::Custom(..) => "custom",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MatMul(a, b)
            | Op::BatchedMatMul { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Affine(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Activation(a, _)
            | Op::Log(a, _)
            | Op::Softmax(a, _)
            | Op::L2Normalize(a)
            | Op::Reduce { x: a, .. }
            | Op::OffDiag(a)
            | Op::GatherRows(a, _)
            | Op::Expand(a, _)
            | Op::Custom(a, _) => vec![*a],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when no path from the root reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item().as_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElementwiseKind) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (value, op) = match kind {
            ElementwiseKind::Add => (x.add(y)?, Op::Add(a, b)),
            ElementwiseKind::Sub => (x.sub(y)?, Op::Sub(a, b)),
            ElementwiseKind::Mul => (x.mul(y)?, Op::Mul(a, b)),
        };
        Ok(self.record(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.affine(a, c, T::zero())
    }

    /// `s·a + c` elementwise.
    pub fn affine(&mut self, a: Var, s: T, c: T) -> Var {
        let value = self.value(a).map(|v| s * v + c);
        self.record(value, Op::Affine(a, s))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                left: xs.to_vec(),
                right: ys.to_vec(),
            });
        }
        let inner = y.numel();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (d, &v) in chunk.iter_mut().zip(y.data()) {
                *d = *d + v;
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.record(value, Op::AddBroadcast(a, b)))
    }

    /// `a[..., K] · w[K, P]` applied over all leading axes of `a`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (x, m) = (self.value(a), self.value(w));
        let (xs, ms) = (x.shape(), m.shape());
        if xs.is_empty() || ms.len() != 2 || xs[xs.len() - 1] != ms[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: xs.to_vec(),
                right: ms.to_vec(),
            });
        }
        let (k, p) = (ms[0], ms[1]);
        let rows = x.numel() / k;
        let mut out = vec![T::zero(); rows * p];
        gemm(rows, k, p, x.data(), false, m.data(), false, &mut out, false);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = p;
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(value, Op::MatMul(a, w)))
    }

    /// Independent matrix products over shared leading axes:
    /// `a[..., M, K] · b[..., K, P]`, or `a · bᵀ` with `b[..., P, K]` when
    /// `trans_b` is set.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "batched_matmul",
            left: xs.to_vec(),
            right: ys.to_vec(),
        };
        if xs.len() < 2 || xs.len() != ys.len() || xs[..xs.len() - 2] != ys[..ys.len() - 2] {
            return Err(mismatch());
        }
        let r = xs.len();
        let (m, k) = (xs[r - 2], xs[r - 1]);
        let (yk, p) = if trans_b {
            (ys[r - 1], ys[r - 2])
        } else {
            (ys[r - 2], ys[r - 1])
        };
        if yk != k {
            return Err(mismatch());
        }
        let batch = numel(&xs[..r - 2]);
        let mut out = vec![T::zero(); batch * m * p];
        for i in 0..batch {
            gemm(
                m,
                k,
                p,
                &x.data()[i * m * k..(i + 1) * m * k],
                false,
                &y.data()[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let mut shape = xs[..r - 2].to_vec();
        shape.extend_from_slice(&[m, p]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(
            value,
            Op::BatchedMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                p,
            },
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = tensor::permute(self.value(a), perm)?;
        Ok(self.record(value, Op::Permute(a, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.record(value, Op::Reshape(a)))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = self.value(a).map(|v| activate(kind, v));
        self.record(value, Op::Activation(a, kind))
    }

    /// `ln(max(a, floor))` elementwise.
    pub fn log(&mut self, a: Var, floor: T) -> Var {
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.record(value, Op::Log(a, floor))
    }

    /// Softmax of `logits / temperature` along the last axis.
    pub fn row_softmax(&mut self, logits: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(logits);
        let (rows, cols) = x.rows_cols();
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = x.row(r);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = ((v - max) / temperature).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.record(value, Op::Softmax(logits, temperature)))
    }

    /// Scales every row (last axis) to unit Euclidean norm; rows with norm
    /// below [`NORMALIZE_EPS`] pass through unchanged.
    pub fn row_l2_normalize(&mut self, z: Var) -> Var {
        let x = self.value(z);
        let (rows, cols) = x.rows_cols();
        let eps = T::of(NORMALIZE_EPS);
        let mut out = x.data().to_vec();
        for r in 0..rows {
            let dst = &mut out[r * cols..(r + 1) * cols];
            let norm = dst.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm >= eps {
                dst.iter_mut().for_each(|v| *v = *v / norm);
            }
        }
        let value = Tensor::new(x.shape(), out).expect("shape preserved");
        self.record(value, Op::L2Normalize(z))
    }

    /// Per-row standardization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = xv.rows_cols();
        if cols < 2 || xv.rank() == 0 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: xv.shape().to_vec(),
                reason: "last axis must have at least 2 entries".into(),
            });
        }
        if g.shape() != [cols] || b.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(cols as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Sum or mean over `axes`; reduced axes are dropped from the shape.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidArgument(format!(
                "reduction axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
        let out_strides = tensor::strides(&out_shape);
        let mut index_map = Vec::with_capacity(xv.numel());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..xv.numel() {
            let flat = keep
                .iter()
                .zip(&out_strides)
                .map(|(&a, &s)| idx[a] * s)
                .sum();
            index_map.push(flat);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&v, &o) in xv.data().iter().zip(&index_map) {
            out[o] = out[o] + v;
        }
        let mean_divisor = match kind {
            Reduction::Sum => None,
            Reduction::Mean => {
                let d = T::of((xv.numel() / out.len()) as f64);
                out.iter_mut().for_each(|v| *v = *v / d);
                Some(d)
            }
        };
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.record(
            value,
            Op::Reduce {
                x,
                index_map,
                mean_divisor,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, Reduction::Sum, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, Reduction::Mean, &axes).expect("all axes are valid")
    }

    /// Drops the diagonal of square trailing matrices: `[..., N, N]` →
    /// `[..., N, N-1]`, row `i` keeping columns `0..i` then `i+1..N`.
    pub fn extract_offdiagonal(&mut self, s: Var) -> Result<Var> {
        let x = self.value(s);
        let shape = x.shape();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] || shape[r - 1] < 2 {
            return Err(Error::InvalidShape {
                op: "extract_offdiagonal",
                shape: shape.to_vec(),
                reason: "requires square trailing matrices with N >= 2".into(),
            });
        }
        let n = shape[r - 1];
        let mut out = Vec::with_capacity(x.numel() / n * (n - 1));
        for mat in x.data().chunks(n * n) {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    out.push(mat[i * n + j]);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[r - 1] = n - 1;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.record(value, Op::OffDiag(s)))
    }

    /// Row lookup: `table[C, D]` indexed by `ids` → `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                reason: "table must be rank 2 and ids nonempty".into(),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.record(value, Op::GatherRows(table, ids.to_vec())))
    }

    /// Repeats `a[B, D]` along a new middle axis: `[B, n, D]`.
    pub fn expand_middle(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || n == 0 {
            return Err(Error::InvalidShape {
                op: "expand_middle",
                shape: x.shape().to_vec(),
                reason: "expects rank 2 input and n > 0".into(),
            });
        }
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(b * n * d);
        for i in 0..b {
            for _ in 0..n {
                out.extend_from_slice(x.row(i));
            }
        }
        let value = Tensor::new(&[b, n, d], out)?;
        Ok(self.record(value, Op::Expand(a, n)))
    }

    /// Unary op with caller-supplied value and adjoint. The adjoint closure
    /// receives `(input, output, upstream_grad)`.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync + 'static,
    ) -> Result<Var> {
        let value = forward(self.value(a));
        if value.numel() == 0 {
            return Err(Error::InvalidArgument("custom op produced no values".into()));
        }
        Ok(self.record(value, Op::Custom(a, Box::new(backward))))
    }

    /// Reverse accumulation from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: root_value.shape().to_vec(),
                reason: "root must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(val(*b))?);
                send(*b, g.mul(val(*a))?);
            }
            Op::Affine(a, s) => send(*a, g.scale(*s)),
            Op::AddBroadcast(a, b) => {
                send(*a, g.clone());
                let bv = val(*b);
                let mut acc = vec![T::zero(); bv.numel()];
                for chunk in g.data().chunks(bv.numel()) {
                    for (d, &v) in acc.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                send(*b, Tensor::new(bv.shape(), acc)?);
            }
            Op::MatMul(a, w) => {
                let (x, m) = (val(*a), val(*w));
                let (k, p) = (m.shape()[0], m.shape()[1]);
                let rows = x.numel() / k;
                let mut ga = vec![T::zero(); x.numel()];
                gemm(rows, p, k, g.data(), false, m.data(), true, &mut ga, false);
                let mut gw = vec![T::zero(); m.numel()];
                gemm(k, rows, p, x.data(), true, g.data(), false, &mut gw, false);
                send(*a, Tensor::new(x.shape(), ga)?);
                send(*w, Tensor::new(m.shape(), gw)?);
            }
            &Op::BatchedMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                p,
            } => {
                let (x, y) = (val(a), val(b));
                let mut ga = vec![T::zero(); x.numel()];
                let mut gb = vec![T::zero(); y.numel()];
                for i in 0..batch {
                    let gi = &g.data()[i * m * p..(i + 1) * m * p];
                    let xi = &x.data()[i * m * k..(i + 1) * m * k];
                    let yi = &y.data()[i * k * p..(i + 1) * k * p];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * p..(i + 1) * k * p];
                    if trans_b {
                        // out = x·yᵀ with y stored [p, k]
                        gemm(m, p, k, gi, false, yi, false, gai, false);
                        gemm(p, m, k, gi, true, xi, false, gbi, false);
                    } else {
                        gemm(m, p, k, gi, false, yi, true, gai, false);
                        gemm(k, m, p, xi, true, gi, false, gbi, false);
                    }
                }
                send(a, Tensor::new(x.shape(), ga)?);
                send(b, Tensor::new(y.shape(), gb)?);
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                send(*a, tensor::permute(g, &inverse)?);
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
            Op::Activation(a, kind) => {
                let x = val(*a);
                send(*a, g.zip_map(x, "activation", |gv, xv| gv * activate_grad(*kind, xv))?);
            }
            Op::Log(a, floor) => {
                let x = val(*a);
                send(
                    *a,
                    g.zip_map(x, "log", |gv, xv| if xv > *floor { gv / xv } else { T::zero() })?,
                );
            }
            Op::Softmax(a, tau) => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                let mut out = vec![T::zero(); y.numel()];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        out[r * cols + c] = yr[c] * (gr[c] - dot) / *tau;
                    }
                }
                send(*a, Tensor::new(y.shape(), out)?);
            }
            Op::L2Normalize(a) => {
                let (x, y) = (val(*a), &node.value);
                let (rows, cols) = x.rows_cols();
                let eps = T::of(NORMALIZE_EPS);
                let mut out = g.data().to_vec();
                for r in 0..rows {
                    let norm = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm < eps {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        out[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                send(*a, Tensor::new(x.shape(), out)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (xv, gv) = (val(*x), val(*gain));
                let (rows, cols) = xv.rows_cols();
                let n = T::of(cols as f64);
                let mut gx = vec![T::zero(); xv.numel()];
                let mut ggain = vec![T::zero(); cols];
                let mut gbias = vec![T::zero(); cols];
                let mut gxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let (mut mean_g, mut mean_gh) = (T::zero(), T::zero());
                    for c in 0..cols {
                        gxhat[c] = gr[c] * gv.data()[c];
                        mean_g = mean_g + gxhat[c];
                        mean_gh = mean_gh + gxhat[c] * hr[c];
                        ggain[c] = ggain[c] + gr[c] * hr[c];
                        gbias[c] = gbias[c] + gr[c];
                    }
                    mean_g = mean_g / n;
                    mean_gh = mean_gh / n;
                    for c in 0..cols {
                        gx[r * cols + c] = inv_std[r] * (gxhat[c] - mean_g - hr[c] * mean_gh);
                    }
                }
                send(*x, Tensor::new(xv.shape(), gx)?);
                send(*gain, Tensor::new(&[cols], ggain)?);
                send(*bias, Tensor::new(&[cols], gbias)?);
            }
            Op::Reduce {
                x,
                index_map,
                mean_divisor,
            } => {
                let xv = val(*x);
                let div = mean_divisor.unwrap_or(T::one());
                let data = index_map.iter().map(|&o| g.data()[o] / div).collect();
                send(*x, Tensor::new(xv.shape(), data)?);
            }
            Op::OffDiag(s) => {
                let sv = val(*s);
                let n = *sv.shape().last().unwrap();
                let mut out = vec![T::zero(); sv.numel()];
                let mut src = g.data().iter();
                for mat in out.chunks_mut(n * n) {
                    for i in 0..n {
                        for j in (0..n).filter(|&j| j != i) {
                            mat[i * n + j] = *src.next().expect("offdiag gradient length");
                        }
                    }
                }
                send(*s, Tensor::new(sv.shape(), out)?);
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let cols = t.shape()[1];
                let mut out = vec![T::zero(); t.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        out[i * cols + c] = out[i * cols + c] + g.data()[r * cols + c];
                    }
                }
                send(*table, Tensor::new(t.shape(), out)?);
            }
            Op::Expand(a, n) => {
                let x = val(*a);
                let (b, d) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![T::zero(); b * d];
                for i in 0..b {
                    for j in 0..*n {
                        let src = &g.data()[(i * n + j) * d..(i * n + j + 1) * d];
                        for c in 0..d {
                            out[i * d + c] = out[i * d + c] + src[c];
                        }
                    }
                }
                send(*a, Tensor::new(x.shape(), out)?);
            }
            Op::Custom(a, backward) => {
                let x = val(*a);
                let ga = backward(x, &node.value, g);
                x.expect_same_shape(&ga, "custom backward")?;
                send(*a, ga);
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_arg<T: Scalar>(x: T) -> T {
    T::of(2.0 * SQRT_2_OVER_PI) * (x + T::of(GELU_COEF) * x * x * x)
}

/// Forward value of an activation. GELU uses the tanh approximation,
/// evaluated as `x·σ(2u)` since `(1 + tanh u)/2 = σ(2u)`.
pub fn activate<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Silu => x * sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::Gelu => x * sigmoid(gelu_arg(x)),
    }
}

fn activate_grad<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
        Activation::Gelu => {
            let s = sigmoid(gelu_arg(x));
            let dv = T::of(2.0 * SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
            s + x * s * (T::one() - s) * dv
        }
    }
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub step_size: f64,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

/// Compares `backward` against `(f(x+h) − f(x−h)) / 2h` for every
/// coordinate of every input. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`; the check passes iff the maximum
/// stays strictly below `tol`.
pub fn grad_check<F>(op_name: &str, f: F, point: &[Tensor<f64>], step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let fail = |msg: String| GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: f64::INFINITY,
        step_size: step,
        passed: false,
        diagnostic: Some(msg),
    };
    let evaluate = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let value = tape.value(root);
        if value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "grad_check",
                shape: value.shape().to_vec(),
                reason: "function must return a scalar".into(),
            });
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{op_name} evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let analytic = match f(&mut tape, &vars).and_then(|root| {
        if !tape.value(root).item().is_finite() {
            return Err(Error::NonFinite(format!("{op_name} evaluated non-finite")));
        }
        tape.backward(root)
    }) {
        Ok(grads) => vars.iter().map(|&v| grads.wrt(&tape, v)).collect::<Vec<_>>(),
        Err(e) => return fail(e.to_string()),
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut probe = point.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for coord in 0..point[input].numel() {
            let orig = point[input].data()[coord];
            probe[input].data_mut()[coord] = orig + step;
            let plus = evaluate(&probe);
            probe[input].data_mut()[coord] = orig - step;
            let minus = evaluate(&probe);
            probe[input].data_mut()[coord] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return fail(format!("input {input} coord {coord}: {e}"));
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some(format!(
                    "input {input} coord {coord}: analytic {a:.6e} numeric {numeric:.6e}"
                ));
            }
        }
    }
    let passed = max_rel < tol;
    GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        step_size: step,
        passed,
        diagnostic: if passed { None } else { worst },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let z = tape.constant(t(&[2], &[0., 0.]));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1., 2.]);

        let b = tape.constant(t(&[2], &[2., 3.]));
        let c = tape.constant(t(&[2], &[4., 5.]));
        let p = tape.mul(b, c).unwrap();
        // scalar loop oracle
        let expect: Vec<f64> = [2., 3.].iter().zip([4., 5.]).map(|(x, y)| x * y).collect();
        assert_eq!(tape.value(p).data(), expect.as_slice());

        let d = tape.constant(t(&[2], &[1., -1.]));
        let zeroed = tape.scale(d, 0.0);
        assert_eq!(tape.value(zeroed).data(), &[0., 0.]);
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let r = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(r).data(), &[1., 2., 3., 4.]);

        let row = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        let r = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0 * 3.0 + 2.0 * 4.0]);

        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let r = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(r).data(), &[0.; 4]);

        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[3, 2], &[1., 0., 3., 4., 0., 0.]));
        let n = tape.row_l2_normalize(z);
        let v = tape.value(n).data();
        assert_eq!(&v[..2], &[1., 0.]);
        assert!((v[2] - 0.6).abs() < 1e-12 && (v[3] - 0.8).abs() < 1e-12);
        assert_eq!(&v[4..], &[0., 0.]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0., 0., 1., 0.]));
        let s = tape.row_softmax(x, 1.0).unwrap();
        let v = tape.value(s).data().to_vec();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        let e = 1f64.exp();
        assert!((v[2] - e / (e + 1.0)).abs() < 1e-12);
        assert!((v[2] - 0.7311).abs() < 1e-4 && (v[3] - 0.2689).abs() < 1e-4);

        let shifted = tape.constant(t(&[1, 2], &[101., 100.]));
        let s2 = tape.row_softmax(shifted, 1.0).unwrap();
        let d = tape.value(s2).data();
        assert!((d[0] - v[2]).abs() < 1e-12 && (d[1] - v[3]).abs() < 1e-12);

        assert!(tape.row_softmax(x, 0.0).is_err());
        assert!(tape.row_softmax(x, -1.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0., 1.]));
        let s = tape.activation(x, Activation::Silu);
        let th = tape.activation(x, Activation::Tanh);
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert_eq!(tape.value(th).data()[0], 0.0);
        let oracle = 1.0 / (1.0 + (-1f64).exp());
        assert!((tape.value(s).data()[1] - oracle).abs() < 1e-12);
        assert!((oracle - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g1 = tape.constant(t(&[2], &[1., 1.]));
        let b0 = tape.constant(t(&[2], &[0., 0.]));
        let x = tape.constant(t(&[2, 2], &[3., 3., 1., -1.]));
        let y = tape.layer_norm(x, g1, b0).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0., 0.]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);

        let g0 = tape.constant(t(&[2], &[0., 0.]));
        let b = tape.constant(t(&[2], &[0.5, -2.]));
        let y = tape.layer_norm(x, g0, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2., 0.5, -2.]);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[2., 4.]));
        let m = tape.mean_all(x);
        assert_eq!(tape.scalar_value(m), 3.0);
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let s = tape.sum_all(z);
        assert_eq!(tape.scalar_value(s), 0.0);
        let y = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let r = tape.reduce(y, Reduction::Mean, &[1]).unwrap();
        assert_eq!(tape.value(r).shape(), &[2, 2]);
        assert_eq!(tape.value(r).data(), &[1., 2., 3., 4.]);
        assert!(tape.reduce(y, Reduction::Sum, &[3]).is_err());
    }

    #[test]
    fn offdiag_examples() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2, 2], &[1., 7., 9., 1.]));
        let o = tape.extract_offdiagonal(s).unwrap();
        assert_eq!(tape.value(o).shape(), &[2, 1]);
        assert_eq!(tape.value(o).data(), &[7., 9.]);

        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let o = tape.extract_offdiagonal(eye).unwrap();
        assert_eq!(tape.value(o).data(), &[0.; 6]);

        // index-enumeration oracle for s[i][j] = 10i + j
        let data: Vec<f64> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (10 * i + j) as f64))
            .collect();
        let s = tape.constant(t(&[3, 3], &data));
        let o = tape.extract_offdiagonal(s).unwrap();
        let mut expect = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    expect.push((10 * i + j) as f64);
                }
            }
        }
        assert_eq!(tape.value(o).data(), expect.as_slice());
        assert_eq!(expect, vec![1., 2., 10., 12., 20., 21.]);

        let rect = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.extract_offdiagonal(rect).is_err());
        let one = tape.constant(Tensor::zeros(&[1, 1]));
        assert!(tape.extract_offdiagonal(one).is_err());
    }

    #[test]
    fn offdiag_diagonal_gradient_is_zero() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let o = tape.extract_offdiagonal(s).unwrap();
        let sq = tape.mul(o, o).unwrap();
        let root = tape.sum_all(sq);
        let g = tape.backward(root).unwrap().wrt(&tape, s);
        for i in 0..3 {
            assert_eq!(g.at(&[i, i]), 0.0);
        }
        assert_eq!(g.at(&[0, 1]), 4.0);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[], &[3.]));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let y = tape.leaf(t(&[2], &[5., 5.]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum_all(sq);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[2., 4.]);
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(&tape, y).data(), &[0., 0.]);

        assert!(tape.backward(sq).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_f64(&[2, 3], &[0.1, -0.4, 0.9, 1.3, -2.0, 0.25]).unwrap());
            let n = tape.row_l2_normalize(x);
            let s = tape.row_softmax(n, 0.3).unwrap();
            let root = tape.sum_all(s);
            let l = tape.log(root, 1e-12);
            let g = tape.backward(l).unwrap();
            (tape.value(l).clone(), g.wrt(&tape, x))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let r = grad_check(
            "sum",
            |tape, v| Ok(tape.sum_all(v[0])),
            &[t(&[3], &[0.3, -0.2, 0.9])],
            1e-3,
            1e-3,
        );
        assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn grad_check_catches_wrong_gradient() {
        let r = grad_check(
            "bad_square",
            |tape, v| {
                let sq = tape.custom_unary(
                    v[0],
                    |x| x.map(|a| a * a),
                    |x, _y, g| g.zip_map(x, "bad", |gv, xv| gv * 3.0 * xv).unwrap(),
                )?;
                Ok(tape.sum_all(sq))
            },
            &[t(&[2], &[0.5, -0.7])],
            1e-3,
            1e-3,
        );
        assert!(!r.passed);
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let r = grad_check(
            "log_of_negative",
            |tape, v| {
                let l = tape.log(v[0], -1.0);
                Ok(tape.sum_all(l))
            },
            &[t(&[1], &[-0.5])],
            1e-3,
            1e-3,
        );
        assert!(!r.passed);
        assert!(r.diagnostic.unwrap().contains("non-finite"));
    }
}
