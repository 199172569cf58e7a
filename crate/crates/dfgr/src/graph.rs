//! Dense tensors and reverse-mode differentiation.
//!
//! A [`Graph`] is a flat tape of recorded primitive operations. Forward
//! methods append a node and return a [`TensorId`]; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node
//! with `requires_grad` set. The tape is rebuilt each training step.
//!
//! All reductions run in a fixed accumulation order, so two identical
//! graphs produce bit-identical values and gradients. Several equivalence
//! checks elsewhere in the crate rely on that (masked keys contribute an
//! exact `0.0`, candidate permutations commute exactly).
//!
//! Generic over [`Scalar`]: `f64` is used everywhere correctness matters,
//! `f32` exists for speed benchmarking only.

use thiserror::Error;

/// Element type of a [`Graph`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn max(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_nan(self) -> bool {
                self.is_nan()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Numerically stable logistic function.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// `x * sigmoid(x)`.
pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::ONE + x * (F::ONE - s))
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward seed must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("masked_bce: no labeled positions")]
    NoLabeledPositions,
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One tape node: a value plus the primitive that produced it.
#[derive(Debug, Clone)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    /// Populated by [`Graph::backward`]; present iff `requires_grad`.
    pub grad: Option<Vec<F>>,
    op: Op<F>,
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    /// `a[m×k] · b[k×n]`
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    /// `a[m×k] · b[n×k]ᵀ`
    MatmulNT {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: F,
    },
    /// `a[m×n] + v[n]` broadcast over rows.
    AddRowVec {
        a: TensorId,
        v: TensorId,
    },
    Silu {
        a: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
    },
    /// Column slice of a 2-D tensor.
    SliceCols {
        a: TensorId,
        start: usize,
        width: usize,
    },
    /// Horizontal concatenation of 2-D tensors with equal row counts.
    ConcatCols {
        parts: Vec<TensorId>,
    },
    /// Per output row: sum of looked-up rows from several tables.
    SumEmbed {
        tables: Vec<TensorId>,
        /// lookups[t] lists (index into `tables`, row) pairs summed into row t.
        lookups: Vec<Vec<(u32, u32)>>,
    },
    /// `out.data[i] = table.data[indices[i]]`, arbitrary output shape.
    Gather {
        table: TensorId,
        indices: Vec<usize>,
    },
    /// Row-wise gated self term: `out[t] = silu(dot(q[t],k[t]) + bias[t]) * v[t]`.
    DiagAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        bias: TensorId,
    },
    /// Sum of all elements, scalar output.
    Sum {
        a: TensorId,
    },
    /// Mean binary cross-entropy from logits over masked-in positions.
    MaskedBce {
        logits: TensorId,
        labels: Vec<F>,
        mask: Vec<bool>,
    },
}

impl<F: Scalar> Op<F> {
    fn parents(&self, out: &mut Vec<TensorId>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Matmul { a, b } | Op::MatmulNT { a, b } => out.extend([*a, *b]),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => out.extend([*a, *b]),
            Op::Scale { a, .. } | Op::Silu { a } | Op::Sum { a } => out.push(*a),
            Op::AddRowVec { a, v } => out.extend([*a, *v]),
            Op::LayerNorm { x, gain, bias, .. } => out.extend([*x, *gain, *bias]),
            Op::SliceCols { a, .. } => out.push(*a),
            Op::ConcatCols { parts } => out.extend(parts.iter().copied()),
            Op::SumEmbed { tables, .. } => out.extend(tables.iter().copied()),
            Op::Gather { table, .. } => out.push(*table),
            Op::DiagAttention { q, k, v, bias } => out.extend([*q, *k, *v, *bias]),
            Op::MaskedBce { logits, .. } => out.push(*logits),
        }
    }
}

/// Tape of recorded operations. Nodes are appended in topological order by
/// construction; reverse id order is a valid backward order.
#[derive(Debug, Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Tensor<F>>,
}

pub type Graph64 = Graph<f64>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last [`Graph::backward`] call, if the node requires grad.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        op: Op<F>,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Insert a leaf node.
    pub fn leaf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
    ) -> Result<TensorId, GraphError> {
        if numel(&shape) != data.len() {
            return Err(GraphError::DataLength {
                expected: numel(&shape),
                got: data.len(),
                shape,
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<TensorId, GraphError> {
        self.leaf(shape, data, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<TensorId, GraphError> {
        self.leaf(shape, data, true)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), GraphError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::ZERO; m * n];
        mm_nn_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::ZERO; m * n];
        mm_nt_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulNT { a, b }))
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
    ) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.elementwise(a, b, "add")?;
        let data: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.elementwise(a, b, "sub")?;
        let data: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.elementwise(a, b, "mul")?;
        let data: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let data: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale { a, c })
    }

    /// Broadcast-add a vector `v[n]` to every row of `a[m×n]`.
    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId, GraphError> {
        let (m, n) = self.dims2(a, "add_row_vec")?;
        if self.shape(v) != [n] {
            return Err(GraphError::ShapeMismatch {
                op: "add_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut data = self.value(a).to_vec();
        let vv = self.value(v).to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, &b) in row.iter_mut().zip(&vv) {
                *x = *x + b;
            }
        }
        let rg = self.any_requires(&[a, v]);
        Ok(self.push(vec![m, n], data, rg, Op::AddRowVec { a, v }))
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<F> = self.value(a).iter().map(|&x| silu(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.shape(a).to_vec(), data, rg, Op::Silu { a })
    }

    /// Row-wise standardization over the last axis, then affine by `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
    ) -> Result<TensorId, GraphError> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(GraphError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let inv_n = F::ONE / F::from_f64(n as f64);
        let mut data = vec![F::ZERO; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mut mean = F::ZERO;
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = F::ZERO;
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv_sigma = F::ONE / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_sigma;
                data[i * n + j] = g[j] * xhat + b[j];
            }
        }
        let rg = self.any_requires(&[x, gain, bias]);
        Ok(self.push(vec![m, n], data, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Columns `start..start+width` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        width: usize,
    ) -> Result<TensorId, GraphError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + width > n {
            return Err(GraphError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + width,
                len: n,
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, width], data, rg, Op::SliceCols { a, start, width }))
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, GraphError> {
        assert!(!parts.is_empty());
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p);
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_requires(parts);
        Ok(self.push(
            vec![m, total],
            data,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Build a `[T×dim]` matrix where row `t` is the sum of table rows named
    /// by `lookups[t]`. Every table must be 2-D with `dim` columns.
    pub fn sum_embed(
        &mut self,
        tables: &[TensorId],
        lookups: Vec<Vec<(u32, u32)>>,
        dim: usize,
    ) -> Result<TensorId, GraphError> {
        for &t in tables {
            let (_, d) = self.dims2(t, "sum_embed")?;
            if d != dim {
                return Err(GraphError::ShapeMismatch {
                    op: "sum_embed",
                    lhs: self.shape(t).to_vec(),
                    rhs: vec![dim],
                });
            }
        }
        let rows = lookups.len();
        let mut data = vec![F::ZERO; rows * dim];
        for (t, refs) in lookups.iter().enumerate() {
            let out = t * dim;
            for &(ti, row) in refs {
                let table = self.value(tables[ti as usize]);
                let src = row as usize * dim;
                for j in 0..dim {
                    data[out + j] = data[out + j] + table[src + j];
                }
            }
        }
        let rg = self.any_requires(tables);
        Ok(self.push(
            vec![rows, dim],
            data,
            rg,
            Op::SumEmbed {
                tables: tables.to_vec(),
                lookups,
            },
        ))
    }

    /// Flat gather: `out[i] = table[indices[i]]` with the given output shape.
    pub fn gather(
        &mut self,
        table: TensorId,
        indices: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<TensorId, GraphError> {
        if numel(&shape) != indices.len() {
            return Err(GraphError::DataLength {
                expected: numel(&shape),
                got: indices.len(),
                shape,
            });
        }
        let src = self.value(table);
        for &ix in &indices {
            if ix >= src.len() {
                return Err(GraphError::IndexOutOfBounds {
                    op: "gather",
                    index: ix,
                    len: src.len(),
                });
            }
        }
        let data: Vec<F> = indices.iter().map(|&ix| src[ix]).collect();
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Gather { table, indices }))
    }

    /// Per-row self-attention term: `out[t] = silu(dot(q[t],k[t]) + bias[t]) * v[t]`.
    pub fn diag_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, GraphError> {
        let (t, d) = self.dims2(q, "diag_attention")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] || self.shape(bias) != [t] {
            return Err(GraphError::ShapeMismatch {
                op: "diag_attention",
                lhs: vec![t, d],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let qs = self.value(q);
        let ks = self.value(k);
        let vs = self.value(v);
        let bs = self.value(bias);
        let mut data = vec![F::ZERO; t * d];
        for i in 0..t {
            let mut s = F::ZERO;
            for l in 0..d {
                s = s + qs[i * d + l] * ks[i * d + l];
            }
            let a = silu(s + bs[i]);
            for l in 0..d {
                data[i * d + l] = a * vs[i * d + l];
            }
        }
        let rg = self.any_requires(&[q, k, v, bias]);
        Ok(self.push(vec![t, d], data, rg, Op::DiagAttention { q, k, v, bias }))
    }

    /// Sum of all elements; scalar result of shape `[1]`.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut s = F::ZERO;
        for &x in self.value(a) {
            s = s + x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum { a })
    }

    /// Mean binary cross-entropy from logits over `mask`-true positions,
    /// in the overflow-safe form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn masked_bce(
        &mut self,
        logits: TensorId,
        labels: &[F],
        mask: &[bool],
    ) -> Result<TensorId, GraphError> {
        let zs = self.value(logits);
        if labels.len() != zs.len() || mask.len() != zs.len() {
            return Err(GraphError::DataLength {
                shape: self.shape(logits).to_vec(),
                expected: zs.len(),
                got: labels.len(),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(GraphError::NoLabeledPositions);
        }
        let mut total = F::ZERO;
        for i in 0..zs.len() {
            if !mask[i] {
                continue;
            }
            let z = zs[i];
            let term = z.max(F::ZERO) - z * labels[i] + (-z.abs()).exp().ln_1p();
            total = total + term;
        }
        let loss = total / F::from_f64(count as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::MaskedBce {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar seed. Overwrites `grad` on every node that
    /// requires grad; each leaf receives its gradient exactly once per call.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), GraphError> {
        let n = numel(self.shape(loss));
        if n != 1 {
            return Err(GraphError::NonScalarLoss { numel: n });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::ONE]);

        let mut parents = Vec::new();
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads, &mut parents);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.grad = if node.requires_grad {
                Some(
                    grads[i]
                        .take()
                        .unwrap_or_else(|| vec![F::ZERO; node.data.len()]),
                )
            } else {
                None
            };
        }
        Ok(())
    }

    /// Propagate `g`, the gradient at node `i`, into the parents' slots.
    fn accumulate(
        &self,
        i: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        parents: &mut Vec<TensorId>,
    ) {
        let node = &self.nodes[i];
        node.op.parents(parents);
        for &p in parents.iter() {
            if self.nodes[p.0].requires_grad && grads[p.0].is_none() {
                grads[p.0] = Some(vec![F::ZERO; self.nodes[p.0].data.len()]);
            }
        }
        let wants = |id: TensorId| self.nodes[id.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    mm_nt_acc(
                        g,
                        &self.nodes[b.0].data,
                        m,
                        n,
                        k,
                        grads[a.0].as_mut().unwrap(),
                    );
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    mm_tn_acc(
                        &self.nodes[a.0].data,
                        g,
                        m,
                        k,
                        n,
                        grads[b.0].as_mut().unwrap(),
                    );
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if wants(*a) {
                    // dA = dC · B
                    mm_nn_acc(
                        g,
                        &self.nodes[b.0].data,
                        m,
                        n,
                        k,
                        grads[a.0].as_mut().unwrap(),
                    );
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    mm_tn_acc(
                        g,
                        &self.nodes[a.0].data,
                        m,
                        n,
                        k,
                        grads[b.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    axpy(grads[a.0].as_mut().unwrap(), g, F::ONE);
                }
                if wants(*b) {
                    axpy(grads[b.0].as_mut().unwrap(), g, F::ONE);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    axpy(grads[a.0].as_mut().unwrap(), g, F::ONE);
                }
                if wants(*b) {
                    axpy(grads[b.0].as_mut().unwrap(), g, -F::ONE);
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bd = &self.nodes[b.0].data;
                    for ((ga, &gi), &bi) in grads[a.0].as_mut().unwrap().iter_mut().zip(g).zip(bd) {
                        *ga = *ga + gi * bi;
                    }
                }
                if wants(*b) {
                    let ad = &self.nodes[a.0].data;
                    for ((gb, &gi), &ai) in grads[b.0].as_mut().unwrap().iter_mut().zip(g).zip(ad) {
                        *gb = *gb + gi * ai;
                    }
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    axpy(grads[a.0].as_mut().unwrap(), g, *c);
                }
            }
            Op::AddRowVec { a, v } => {
                let n = self.nodes[v.0].data.len();
                if wants(*a) {
                    axpy(grads[a.0].as_mut().unwrap(), g, F::ONE);
                }
                if wants(*v) {
                    let gv = grads[v.0].as_mut().unwrap();
                    for row in g.chunks_exact(n) {
                        for (o, &x) in gv.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::Silu { a } => {
                if wants(*a) {
                    let xs = &self.nodes[a.0].data;
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..xs.len() {
                        ga[i] = ga[i] + g[i] * silu_grad(xs[i]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.layer_norm_backward(*x, *gain, *bias, *eps, g, grads);
            }
            Op::SliceCols { a, start, width } => {
                if wants(*a) {
                    let n = self.nodes[a.0].shape[1];
                    let ga = grads[a.0].as_mut().unwrap();
                    let m = self.nodes[a.0].shape[0];
                    for i in 0..m {
                        for j in 0..*width {
                            ga[i * n + start + j] = ga[i * n + start + j] + g[i * width + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if wants(p) {
                        let gp = grads[p.0].as_mut().unwrap();
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SumEmbed { tables, lookups } => {
                let dim = node.shape[1];
                for (t, refs) in lookups.iter().enumerate() {
                    let src = t * dim;
                    for &(ti, row) in refs {
                        let table = tables[ti as usize];
                        if wants(table) {
                            let gt = grads[table.0].as_mut().unwrap();
                            let dst = row as usize * dim;
                            for j in 0..dim {
                                gt[dst + j] = gt[dst + j] + g[src + j];
                            }
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                if wants(*table) {
                    let gt = grads[table.0].as_mut().unwrap();
                    for (i, &ix) in indices.iter().enumerate() {
                        gt[ix] = gt[ix] + g[i];
                    }
                }
            }
            Op::DiagAttention { q, k, v, bias } => {
                let (t, d) = (node.shape[0], node.shape[1]);
                let qs = &self.nodes[q.0].data;
                let ks = &self.nodes[k.0].data;
                let vs = &self.nodes[v.0].data;
                let bs = &self.nodes[bias.0].data;
                for i in 0..t {
                    let mut s = F::ZERO;
                    for l in 0..d {
                        s = s + qs[i * d + l] * ks[i * d + l];
                    }
                    s = s + bs[i];
                    let a_i = silu(s);
                    let mut gv_dot = F::ZERO;
                    for l in 0..d {
                        gv_dot = gv_dot + g[i * d + l] * vs[i * d + l];
                    }
                    let ds = gv_dot * silu_grad(s);
                    if wants(*q) {
                        let gq = grads[q.0].as_mut().unwrap();
                        for l in 0..d {
                            gq[i * d + l] = gq[i * d + l] + ds * ks[i * d + l];
                        }
                    }
                    if wants(*k) {
                        let gk = grads[k.0].as_mut().unwrap();
                        for l in 0..d {
                            gk[i * d + l] = gk[i * d + l] + ds * qs[i * d + l];
                        }
                    }
                    if wants(*v) {
                        let gv = grads[v.0].as_mut().unwrap();
                        for l in 0..d {
                            gv[i * d + l] = gv[i * d + l] + a_i * g[i * d + l];
                        }
                    }
                    if wants(*bias) {
                        let gb = grads[bias.0].as_mut().unwrap();
                        gb[i] = gb[i] + ds;
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    axpy_scalar(grads[a.0].as_mut().unwrap(), g[0]);
                }
            }
            Op::MaskedBce {
                logits,
                labels,
                mask,
            } => {
                if wants(*logits) {
                    let zs = &self.nodes[logits.0].data;
                    let count = F::from_f64(mask.iter().filter(|&&m| m).count() as f64);
                    let gl = grads[logits.0].as_mut().unwrap();
                    for i in 0..zs.len() {
                        if mask[i] {
                            gl[i] = gl[i] + g[0] * (sigmoid(zs[i]) - labels[i]) / count;
                        }
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let m = self.nodes[x.0].shape[0];
        let n = self.nodes[x.0].shape[1];
        let xs = &self.nodes[x.0].data;
        let gs = &self.nodes[gain.0].data;
        let inv_n = F::ONE / F::from_f64(n as f64);
        let wants_x = self.nodes[x.0].requires_grad;
        let wants_g = self.nodes[gain.0].requires_grad;
        let wants_b = self.nodes[bias.0].requires_grad;
        let mut xhat = vec![F::ZERO; n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let grow = &g[i * n..(i + 1) * n];
            let mut mean = F::ZERO;
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = F::ZERO;
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv_sigma = F::ONE / (var + eps).sqrt();
            for j in 0..n {
                xhat[j] = (row[j] - mean) * inv_sigma;
            }
            if wants_g {
                let gg = grads[gain.0].as_mut().unwrap();
                for j in 0..n {
                    gg[j] = gg[j] + grow[j] * xhat[j];
                }
            }
            if wants_b {
                let gb = grads[bias.0].as_mut().unwrap();
                for j in 0..n {
                    gb[j] = gb[j] + grow[j];
                }
            }
            if wants_x {
                // dx = (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat)) / sigma
                let mut mean_dxhat = F::ZERO;
                let mut mean_dxhat_xhat = F::ZERO;
                for j in 0..n {
                    let dxh = grow[j] * gs[j];
                    mean_dxhat = mean_dxhat + dxh;
                    mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[j];
                }
                mean_dxhat = mean_dxhat * inv_n;
                mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                let gx = grads[x.0].as_mut().unwrap();
                for j in 0..n {
                    let dxh = grow[j] * gs[j];
                    gx[i * n + j] =
                        gx[i * n + j] + (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_sigma;
                }
            }
        }
    }
}

fn axpy<F: Scalar>(out: &mut [F], g: &[F], c: F) {
    for (o, &x) in out.iter_mut().zip(g) {
        *o = *o + x * c;
    }
}

fn axpy_scalar<F: Scalar>(out: &mut [F], c: F) {
    for o in out.iter_mut() {
        *o = *o + c;
    }
}

/// `out += a[m×k] · b[k×n]`, accumulating over `l` in ascending order.
fn mm_nn_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &blj) in orow.iter_mut().zip(brow) {
                *o = *o + ail * blj;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`, strict sequential dot per element.
fn mm_nt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, accumulating over rows of `a`/`b` in order.
fn mm_tn_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &ali) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &blj) in orow.iter_mut().zip(brow) {
                *o = *o + ali * blj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_exact() {
        for n in [1usize, 3, 16, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let a = randn(&mut rng, n * n);
            let mut eye = vec![0.0; n * n];
            for i in 0..n {
                eye[i * n + i] = 1.0;
            }
            let mut g = Graph64::new();
            let ta = g.constant(vec![n, n], a.clone()).unwrap();
            let ti = g.constant(vec![n, n], eye).unwrap();
            let left = g.matmul(ti, ta).unwrap();
            let right = g.matmul(ta, ti).unwrap();
            assert_eq!(g.value(left), &a[..]);
            assert_eq!(g.value(right), &a[..]);
        }
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph64::new();
        let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    /// Naive triple-loop oracle, independent of the mm_* kernels.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_random_vs_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (5, 7, 3);
        let a = randn(&mut rng, m * k);
        let b = randn(&mut rng, k * n);
        let expect = matmul_oracle(&a, &b, m, k, n);
        let mut g = Graph64::new();
        let ta = g.constant(vec![m, k], a).unwrap();
        let tb = g.constant(vec![k, n], b).unwrap();
        let tc = g.matmul(ta, tb).unwrap();
        for (got, want) in g.value(tc).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph64::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn silu_values() {
        let mut g = Graph64::new();
        let x = g.constant(vec![4], vec![0.0, 20.0, 1.0, 25.0]).unwrap();
        let y = g.silu(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        // asymptote: silu(x) = x - x*e^-x/(1+e^-x), so 4.1e-8 at x=20
        assert!((v[1] - 20.0).abs() < 1e-7);
        assert!((v[3] - 25.0).abs() < 1e-8);
        // scalar oracle: 1 / (1 + e^-1)
        assert!((v[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph64::new();
        let x = g.constant(vec![1, 4], vec![5.0; 4]).unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in g.value(y) {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_standardized_row_fixed_point() {
        let mut g = Graph64::new();
        let x = g.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let gain = g.constant(vec![2], vec![1.0; 2]).unwrap();
        let bias = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y);
        assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, n) = (4, 8);
        let xs = randn(&mut rng, m * n);
        let mut g = Graph64::new();
        let x = g.constant(vec![m, n], xs.clone()).unwrap();
        let gain = g.constant(vec![n], vec![1.0; n]).unwrap();
        let bias = g.constant(vec![n], vec![0.0; n]).unwrap();
        // eps small enough not to perturb the standardization itself
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let out = g.value(y);
        for i in 0..m {
            let row = &out[i * n..(i + 1) * n];
            // two-pass oracle on the output row
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10, "row {i} mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "row {i} var {var}");
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph64::new();
        let x = g
            .param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])
            .unwrap();
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_quadratic_gives_x() {
        let data = vec![1.0, -2.0, 3.0, 0.25];
        let mut g = Graph64::new();
        let x = g.param(vec![4], data.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        for (got, want) in g.grad(x).unwrap().iter().zip(&data) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_non_scalar_seed_rejected() {
        let mut g = Graph64::new();
        let x = g.param(vec![3], vec![1.0; 3]).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(GraphError::NonScalarLoss { numel: 3 })
        ));
    }

    #[test]
    fn backward_deterministic_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut g = Graph64::new();
            let a = g.param(vec![4, 6], randn(&mut rng, 24)).unwrap();
            let b = g.param(vec![6, 5], randn(&mut rng, 30)).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.silu(c);
            let loss = g.sum(s);
            g.backward(loss).unwrap();
            (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert!(ga1
            .iter()
            .zip(&ga2)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(gb1
            .iter()
            .zip(&gb2)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Central finite difference of a scalar-valued rebuild function.
    fn fd_grad(build: &dyn Fn(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        for i in 0..at.len() {
            let h = step * at[i].abs().max(1.0);
            let mut plus = at.to_vec();
            plus[i] += h;
            let mut minus = at.to_vec();
            minus[i] -= h;
            grad[i] = (build(&plus) - build(&minus)) / (2.0 * h);
        }
        grad
    }

    fn check_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < rel,
                "component {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Every primitive's analytic gradient matches central finite differences
    /// on random inputs, away from activation saturation.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        // matmul + add + silu + sum chain, gradient w.r.t. a
        let b = randn(&mut rng, 12);
        let bias = randn(&mut rng, 4);
        let a0 = randn(&mut rng, 9);
        let f = |a: &[f64]| {
            let mut g = Graph64::new();
            let ta = g.param(vec![3, 3], a.to_vec()).unwrap();
            let tb = g.constant(vec![3, 4], b.clone()).unwrap();
            let tv = g.constant(vec![4], bias.clone()).unwrap();
            let mm = g.matmul(ta, tb).unwrap();
            let ab = g.add_row_vec(mm, tv).unwrap();
            let s = g.silu(ab);
            let l = g.sum(s);
            g.value(l)[0]
        };
        let mut g = Graph64::new();
        let ta = g.param(vec![3, 3], a0.clone()).unwrap();
        let tb = g.constant(vec![3, 4], b.clone()).unwrap();
        let tv = g.constant(vec![4], bias.clone()).unwrap();
        let mm = g.matmul(ta, tb).unwrap();
        let ab = g.add_row_vec(mm, tv).unwrap();
        let s = g.silu(ab);
        let l = g.sum(s);
        g.backward(l).unwrap();
        check_close(g.grad(ta).unwrap(), &fd_grad(&f, &a0, 1e-6), 1e-5);

        // matmul_nt + mul + layer_norm, gradients w.r.t. both operands
        let q0 = randn(&mut rng, 8);
        let k0 = randn(&mut rng, 8);
        let mask: Vec<f64> = (0..16)
            .map(|i| if i % 3 == 0 { 0.0 } else { 1.0 })
            .collect();
        let gain0 = randn(&mut rng, 4);
        let bias0 = randn(&mut rng, 4);
        let eval = |q: &[f64], k: &[f64], gain: &[f64], bias: &[f64]| {
            let mut g = Graph64::new();
            let tq = g.param(vec![4, 2], q.to_vec()).unwrap();
            let tk = g.param(vec![4, 2], k.to_vec()).unwrap();
            let tm = g.constant(vec![4, 4], mask.clone()).unwrap();
            let tg = g.param(vec![4], gain.to_vec()).unwrap();
            let tb = g.param(vec![4], bias.to_vec()).unwrap();
            let sc = g.matmul_nt(tq, tk).unwrap();
            let masked = g.mul(sc, tm).unwrap();
            let normed = g.layer_norm(masked, tg, tb, 1e-6).unwrap();
            let act = g.silu(normed);
            let l = g.sum(act);
            (g, tq, tk, tg, tb, l)
        };
        let (mut g, tq, tk, tg, tb, l) = eval(&q0, &k0, &gain0, &bias0);
        g.backward(l).unwrap();
        let gq = g.grad(tq).unwrap().to_vec();
        let gk = g.grad(tk).unwrap().to_vec();
        let gg = g.grad(tg).unwrap().to_vec();
        let gb = g.grad(tb).unwrap().to_vec();
        let fq = |q: &[f64]| {
            let (g, _, _, _, _, l) = eval(q, &k0, &gain0, &bias0);
            g.value(l)[0]
        };
        let fk = |k: &[f64]| {
            let (g, _, _, _, _, l) = eval(&q0, k, &gain0, &bias0);
            g.value(l)[0]
        };
        let fg = |gain: &[f64]| {
            let (g, _, _, _, _, l) = eval(&q0, &k0, gain, &bias0);
            g.value(l)[0]
        };
        let fb = |bias: &[f64]| {
            let (g, _, _, _, _, l) = eval(&q0, &k0, &gain0, bias);
            g.value(l)[0]
        };
        check_close(&gq, &fd_grad(&fq, &q0, 1e-6), 1e-5);
        check_close(&gk, &fd_grad(&fk, &k0, 1e-6), 1e-5);
        check_close(&gg, &fd_grad(&fg, &gain0, 1e-6), 1e-5);
        check_close(&gb, &fd_grad(&fb, &bias0, 1e-6), 1e-5);

        // diag_attention, sum_embed, gather, slice/concat, sub, masked_bce
        let q0 = randn(&mut rng, 6);
        let v0 = randn(&mut rng, 6);
        let table0 = randn(&mut rng, 12);
        let labels = vec![1.0, 0.0, 1.0];
        let bce_mask = vec![true, false, true];
        let eval2 = |q: &[f64], table: &[f64]| {
            let mut g = Graph64::new();
            let tq = g.param(vec![3, 2], q.to_vec()).unwrap();
            let tt = g.param(vec![6, 2], table.to_vec()).unwrap();
            let tv = g.constant(vec![3, 2], v0.clone()).unwrap();
            // embedding: rows 1,4 summed, row 0, row 5
            let emb = g
                .sum_embed(
                    &[tt],
                    vec![vec![(0, 1), (0, 4)], vec![(0, 0)], vec![(0, 5)]],
                    2,
                )
                .unwrap();
            let diagbias = g.gather(tt, vec![0, 3, 11], vec![3]).unwrap();
            let att = g.diag_attention(tq, emb, tv, diagbias).unwrap();
            let c = g.concat_cols(&[att, emb]).unwrap();
            let sl = g.slice_cols(c, 1, 2).unwrap();
            let d = g.sub(sl, tv).unwrap();
            let row = g.slice_cols(d, 0, 1).unwrap();
            let l = g.masked_bce(row, &labels, &bce_mask).unwrap();
            (g, tq, tt, l)
        };
        let (mut g, tq, tt, l) = eval2(&q0, &table0);
        g.backward(l).unwrap();
        let gq = g.grad(tq).unwrap().to_vec();
        let gt = g.grad(tt).unwrap().to_vec();
        let f_q = |q: &[f64]| {
            let (g, _, _, l) = eval2(q, &table0);
            g.value(l)[0]
        };
        let f_t = |t: &[f64]| {
            let (g, _, _, l) = eval2(&q0, t);
            g.value(l)[0]
        };
        check_close(&gq, &fd_grad(&f_q, &q0, 1e-6), 1e-5);
        check_close(&gt, &fd_grad(&f_t, &table0, 1e-6), 1e-5);
    }

    #[test]
    fn f32_mode_runs_the_same_ops() {
        // the 32-bit mode exists for speed benchmarking; same tape, same
        // rules, looser tolerance
        let mut g: Graph<f32> = Graph::new();
        let a = g
            .param(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75])
            .unwrap();
        let b = g
            .param(vec![3, 2], vec![1.0, 0.0, 0.5, -0.5, 0.25, 2.0])
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.silu(c);
        let loss = g.sum(s);
        g.backward(loss).unwrap();

        let mut g64 = Graph64::new();
        let a64 = g64
            .param(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75])
            .unwrap();
        let b64 = g64
            .param(vec![3, 2], vec![1.0, 0.0, 0.5, -0.5, 0.25, 2.0])
            .unwrap();
        let c64 = g64.matmul(a64, b64).unwrap();
        let s64 = g64.silu(c64);
        let loss64 = g64.sum(s64);
        g64.backward(loss64).unwrap();

        assert!((f64::from(g.value(loss)[0]) - g64.value(loss64)[0]).abs() < 1e-5);
        for (x, y) in g.grad(a).unwrap().iter().zip(g64.grad(a64).unwrap()) {
            assert!((f64::from(*x) - y).abs() < 1e-5);
        }
    }

    #[test]
    fn masked_bce_values() {
        let mut g = Graph64::new();
        let z = g.param(vec![4], vec![0.0; 4]).unwrap();
        let l = g.masked_bce(z, &[1.0, 0.0, 1.0, 0.0], &[true; 4]).unwrap();
        assert!((g.value(l)[0] - (2.0f64).ln()).abs() < 1e-15);

        let mut g = Graph64::new();
        let z = g.param(vec![2], vec![20.0, -20.0]).unwrap();
        let l = g.masked_bce(z, &[1.0, 0.0], &[true, true]).unwrap();
        assert!(g.value(l)[0] < 1e-8);

        let mut g = Graph64::new();
        let z = g.param(vec![2], vec![0.3, 0.7]).unwrap();
        assert!(matches!(
            g.masked_bce(z, &[1.0, 0.0], &[false, false]),
            Err(GraphError::NoLabeledPositions)
        ));
    }

    #[test]
    fn masked_bce_random_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs = randn(&mut rng, 8)
            .iter()
            .map(|x| x * 4.0)
            .collect::<Vec<_>>();
        let labels: Vec<f64> = (0..8).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let mask: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        let mut g = Graph64::new();
        let z = g.param(vec![8], zs.clone()).unwrap();
        let l = g.masked_bce(z, &labels, &mask).unwrap();
        // direct evaluation of -[y ln s + (1-y) ln(1-s)]
        let mut want = 0.0;
        let mut count = 0;
        for i in 0..8 {
            if mask[i] {
                let s = 1.0 / (1.0 + (-zs[i]).exp());
                want += -(labels[i] * s.ln() + (1.0 - labels[i]) * (1.0 - s).ln());
                count += 1;
            }
        }
        want /= f64::from(count);
        assert!((g.value(l)[0] - want).abs() < 1e-12);
    }
}
