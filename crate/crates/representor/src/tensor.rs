//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! Every operation records a node holding its parents, and `backward` on a
//! scalar walks the graph in reverse topological order, accumulating
//! gradients by addition. The graph lives only as long as the tensors built
//! during one forward pass; leaf tensors (parameters) keep their `grad`
//! buffers after the graph is dropped.
//!
//! All arithmetic is 64-bit and sequential, so identical inputs produce
//! bit-identical outputs.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shapes incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An id fell outside the table it indexes.
    IndexOutOfRange { index: usize, bound: usize },
    InvalidAxis { axis: usize, rank: usize },
    /// `backward` was called on a non-scalar.
    NotScalar { shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range for size {bound}")
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} invalid for rank-{rank} tensor")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled. Used by decoding and evaluation,
/// where gradients are never needed and node buildup would waste memory.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
enum Op {
    /// Elementwise add; `broadcast_rhs` means rhs shape is a suffix of lhs.
    Add { broadcast_rhs: bool },
    /// Elementwise multiply, same broadcast rule.
    Mul { broadcast_rhs: bool },
    Scale(f64),
    /// lhs [.., m, k] x rhs: either [k, n] (shared) or [.., k, n] (batched).
    Matmul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        rhs_batched: bool,
    },
    Relu,
    Reshape,
    Transpose { a: usize, b: usize },
    Concat { axis: usize },
    /// `keep[i] == false` positions were overwritten by the fill value.
    MaskedFill { keep: Rc<Vec<bool>> },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Parents: input, gain, bias. Normalizes the last dimension.
    LayerNorm { eps: f64 },
    /// Row gather from a [V, d] table; backward scatter-adds.
    Embedding { ids: Rc<Vec<usize>> },
    /// Per-row element selection from [n, c]; backward scatters.
    Pick { ids: Rc<Vec<usize>> },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    /// Mask entries are 0 or 1/(1-p); backward multiplies by the same mask.
    Dropout { mask: Rc<Vec<f64>> },
}

struct Node {
    op: Op,
    parents: Vec<Tensor>,
}

struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<Node>,
}

/// Shared handle to one tensor. Cloning is cheap and aliases the storage,
/// which is what makes weight tying work: every logical use site of a tied
/// parameter holds the same handle, so backward accumulates all their
/// gradients into the one buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        write!(f, "Tensor{:?}", d.shape)
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel_of(shape) != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Self::from_parts(values, shape.to_vec(), false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let t = Tensor::new(values, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::from_parts(vec![0.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts(vec![v], Vec::new(), false, None)
    }

    fn from_parts(
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                requires_grad,
                grad: None,
                node,
            })),
        }
    }

    fn result_of(
        &self,
        values: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        parents: Vec<Tensor>,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        if grad_enabled() && requires {
            Tensor::from_parts(values, shape, true, Some(Node { op, parents }))
        } else {
            Tensor::from_parts(values, shape, false, None)
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.values.as_slice())
    }

    pub fn value_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        debug_assert_eq!(d.values.len(), 1, "item() on non-scalar");
        d.values[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Adds directly into the gradient buffer; no-op unless `requires_grad`.
    /// Used by gradient clipping to rewrite scaled gradients.
    pub fn add_to_grad(&self, contribution: &[f64]) {
        self.accumulate_grad(contribution);
    }

    /// Overwrites the stored values; used by the optimizer. The tensor must
    /// not be part of a live graph when this is called.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.values.len(), values.len(), "set_values length mismatch");
        d.values.copy_from_slice(values);
    }

    /// Copy with the same values and no graph attachment.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::from_parts(d.values.clone(), d.shape.clone(), false, None)
    }

    fn ptr_key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// True when this handle aliases the same storage as `other`.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_op(rhs, "add")
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_op(rhs, "mul")
    }

    fn zip_op(&self, rhs: &Tensor, op: &'static str) -> Result<Tensor, TensorError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let broadcast = ls != rs;
        if broadcast && !is_suffix(&rs, &ls) {
            return Err(TensorError::ShapeMismatch { op, lhs: ls, rhs: rs });
        }
        let a = self.values();
        let b = rhs.values();
        let mut out = Vec::with_capacity(a.len());
        if op == "add" {
            for chunk in a.chunks_exact(b.len().max(1)) {
                out.extend(chunk.iter().zip(b.iter()).map(|(x, y)| x + y));
            }
        } else {
            for chunk in a.chunks_exact(b.len().max(1)) {
                out.extend(chunk.iter().zip(b.iter()).map(|(x, y)| x * y));
            }
        }
        drop(a);
        drop(b);
        let node_op = if op == "add" {
            Op::Add { broadcast_rhs: broadcast }
        } else {
            Op::Mul { broadcast_rhs: broadcast }
        };
        Ok(self.result_of(out, ls, node_op, vec![self.clone(), rhs.clone()]))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|x| x * s).collect();
        self.result_of(out, self.shape(), Op::Scale(s), vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|x| x.max(0.0)).collect();
        self.result_of(out, self.shape(), Op::Relu, vec![self.clone()])
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product. `self` is `[.., m, k]`; `rhs` is either a plain
    /// `[k, n]` matrix applied to every leading block, or `[.., k, n]` with
    /// identical leading dimensions.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls.len() < 2 || rs.len() < 2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (rk, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let rhs_batched = rs.len() > 2;
        if rk != k || (rhs_batched && rs[..rs.len() - 2] != ls[..ls.len() - 2]) {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        let a = self.values();
        let b = rhs.values();
        let mut out = vec![0.0; batch * m * n];
        if rhs_batched {
            for i in 0..batch {
                mm_nn(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            // One big [batch*m, k] x [k, n] product.
            mm_nn(&a, &b, &mut out, batch * m, k, n);
        }
        drop(a);
        drop(b);
        let mut shape = ls[..ls.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.result_of(
            out,
            shape,
            Op::Matmul { batch, m, k, n, rhs_batched },
            vec![self.clone(), rhs.clone()],
        ))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value_vec();
        Ok(self.result_of(out, shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Swaps two axes, materializing the permuted copy.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        let rank = shape.len();
        if a >= rank || b >= rank {
            return Err(TensorError::InvalidAxis { axis: a.max(b), rank });
        }
        let mut new_shape = shape.clone();
        new_shape.swap(a, b);
        let out = permute_swap(&self.values(), &shape, a, b);
        Ok(self.result_of(out, new_shape, Op::Transpose { a, b }, vec![self.clone()]))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        let rank = first.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != rank
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let v = p.values();
                let rows = p.inner.borrow().shape[axis];
                let block = rows * inner;
                out.extend_from_slice(&v[o * block..(o + 1) * block]);
            }
        }
        let parents = parts.to_vec();
        Ok(parts[0].result_of(out, shape, Op::Concat { axis }, parents))
    }

    // ── masking and normalization ───────────────────────────────────

    /// Overwrites positions where `keep` is false with `value` (typically
    /// negative infinity ahead of a softmax).
    pub fn masked_fill(&self, keep: &[bool], value: f64) -> Result<Tensor, TensorError> {
        if keep.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape(),
                rhs: vec![keep.len()],
            });
        }
        let out: Vec<f64> = self
            .values()
            .iter()
            .zip(keep)
            .map(|(x, &k)| if k { *x } else { value })
            .collect();
        Ok(self.result_of(
            out,
            self.shape(),
            Op::MaskedFill { keep: Rc::new(keep.to_vec()) },
            vec![self.clone()],
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        let out = lanes_map(&self.values(), &shape, axis, softmax_lane);
        Ok(self.result_of(out, shape, Op::Softmax { axis }, vec![self.clone()]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        let out = lanes_map(&self.values(), &shape, axis, log_softmax_lane);
        Ok(self.result_of(out, shape, Op::LogSoftmax { axis }, vec![self.clone()]))
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies the affine `gain`/`bias` (both shaped like the last dim).
    pub fn layer_norm(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&0);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gain.shape(),
            });
        }
        let x = self.values();
        let g = gain.values();
        let b = bias.values();
        let mut out = vec![0.0; x.len()];
        for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        Ok(self.result_of(
            out,
            self.shape(),
            Op::LayerNorm { eps },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    // ── gather / scatter ────────────────────────────────────────────

    /// Gathers rows of a `[V, d]` table; backward scatter-adds, so repeated
    /// ids and tied tables accumulate correctly.
    pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor, TensorError> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let tv = table.values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, bound: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        drop(tv);
        Ok(table.result_of(
            out,
            vec![ids.len(), d],
            Op::Embedding { ids: Rc::new(ids.to_vec()) },
            vec![table.clone()],
        ))
    }

    /// From `[n, c]`, picks `self[i, ids[i]]` for each row, yielding `[n]`.
    pub fn pick(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 || ids.len() != shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let c = shape[1];
        let v = self.values();
        let mut out = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if id >= c {
                return Err(TensorError::IndexOutOfRange { index: id, bound: c });
            }
            out.push(v[i * c + id]);
        }
        drop(v);
        Ok(self.result_of(
            out,
            vec![ids.len()],
            Op::Pick { ids: Rc::new(ids.to_vec()) },
            vec![self.clone()],
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        self.result_of(vec![s], Vec::new(), Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.values().iter().sum::<f64>() / n;
        self.result_of(vec![s], Vec::new(), Op::MeanAll, vec![self.clone()])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = lane_dims(&shape, axis);
        let v = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * len + j) * inner + i];
                }
            }
        }
        drop(v);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        Ok(self.result_of(out, new_shape, Op::SumAxis { axis }, vec![self.clone()]))
    }

    /// Inverted dropout: keeps each entry with probability `1 - p`, scaling
    /// kept entries by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Tensor {
        if p <= 0.0 {
            return self.clone();
        }
        assert!(p < 1.0, "dropout rate must be < 1");
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f64> = self.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.result_of(
            out,
            self.shape(),
            Op::Dropout { mask: Rc::new(mask) },
            vec![self.clone()],
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populates `grad` on every `requires_grad` tensor reachable from this
    /// scalar. Gradients from multiple consumers accumulate by addition.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape() });
        }
        let topo = self.topo_order();
        {
            let mut d = self.inner.borrow_mut();
            let g = d.grad.get_or_insert_with(|| vec![0.0; 1]);
            g[0] += 1.0;
        }
        for t in topo.iter().rev() {
            t.step_backward();
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative post-order DFS; the stack holds (tensor, parent cursor).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.ptr_key());
        while let Some((t, cursor)) = stack.pop() {
            let next_parent = {
                let d = t.inner.borrow();
                d.node.as_ref().and_then(|n| n.parents.get(cursor).cloned())
            };
            match next_parent {
                Some(p) => {
                    stack.push((t, cursor + 1));
                    if p.requires_grad() && seen.insert(p.ptr_key()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }
        order
    }

    fn step_backward(&self) {
        let d = self.inner.borrow();
        let Some(node) = d.node.as_ref() else { return };
        let Some(gy) = d.grad.as_ref() else { return };
        let gy = gy.clone();
        let shape = d.shape.clone();
        let y_values = match node.op {
            Op::Softmax { .. } | Op::LogSoftmax { .. } => Some(d.values.clone()),
            _ => None,
        };
        let op = node.op.clone();
        let parents = node.parents.clone();
        drop(d);
        backward_op(&op, &parents, &gy, &shape, y_values.as_deref());
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut d = self.inner.borrow_mut();
        if !d.requires_grad {
            return;
        }
        let n = d.values.len();
        let g = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Applies `f` to every lane along `axis`, writing results in place.
fn lanes_map(v: &[f64], shape: &[usize], axis: usize, f: fn(&mut [f64])) -> Vec<f64> {
    let (outer, len, inner) = lane_dims(shape, axis);
    let mut out = v.to_vec();
    if inner == 1 {
        // Last-axis lanes are contiguous.
        for lane in out.chunks_exact_mut(len) {
            f(lane);
        }
        return out;
    }
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..len {
                lane[j] = out[(o * len + j) * inner + i];
            }
            f(&mut lane);
            for j in 0..len {
                out[(o * len + j) * inner + i] = lane[j];
            }
        }
    }
    out
}

fn softmax_lane(lane: &mut [f64]) {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_lane(lane: &mut [f64]) {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = lane.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    for v in lane.iter_mut() {
        *v -= log_z;
    }
}

/// Materializes the copy with axes `a` and `b` swapped. The source
/// decomposes as [outer, A, mid, B, inner]; the destination is walked in
/// row-major order so the innermost block is a contiguous copy.
fn permute_swap(v: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    if a == b {
        return v.to_vec();
    }
    let (a, b) = (a.min(b), a.max(b));
    let outer: usize = shape[..a].iter().product();
    let ax = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let bx = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = Vec::with_capacity(v.len());
    for o in 0..outer {
        for jb in 0..bx {
            for m in 0..mid {
                for ja in 0..ax {
                    let src = (((o * ax + ja) * mid + m) * bx + jb) * inner;
                    out.extend_from_slice(&v[src..src + inner]);
                }
            }
        }
    }
    out
}

// ── matmul kernels ──────────────────────────────────────────────────
// Fixed loop orders: deterministic within a build. Everything reduces to
// the axpy form over exactly-sized rows, which bounds-check-eliminates and
// vectorizes; gradient products transpose one operand first rather than
// taking strided dot products.

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for j in 0..y.len() {
        y[j] += alpha * x[j];
    }
}

/// c += a[m,k] x b[k,n]
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// c += a[m,k]^T x b[m,n]
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(aip, brow, &mut c[p * n..(p + 1) * n]);
        }
    }
}

fn transpose_2d(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

fn backward_op(
    op: &Op,
    parents: &[Tensor],
    gy: &[f64],
    y_shape: &[usize],
    y_values: Option<&[f64]>,
) {
    match op {
        Op::Add { broadcast_rhs } => {
            parents[0].accumulate_grad(gy);
            if parents[1].requires_grad() {
                if *broadcast_rhs {
                    parents[1].accumulate_grad(&fold_to_suffix(gy, parents[1].numel()));
                } else {
                    parents[1].accumulate_grad(gy);
                }
            }
        }
        Op::Mul { broadcast_rhs } => {
            let a = parents[0].value_vec();
            let b = parents[1].value_vec();
            if parents[0].requires_grad() {
                let mut da = Vec::with_capacity(gy.len());
                for chunk in gy.chunks_exact(b.len().max(1)) {
                    da.extend(chunk.iter().zip(b.iter()).map(|(g, y)| g * y));
                }
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let raw: Vec<f64> = gy.iter().zip(&a).map(|(g, x)| g * x).collect();
                if *broadcast_rhs {
                    parents[1].accumulate_grad(&fold_to_suffix(&raw, b.len()));
                } else {
                    parents[1].accumulate_grad(&raw);
                }
            }
        }
        Op::Scale(s) => {
            let da: Vec<f64> = gy.iter().map(|g| g * s).collect();
            parents[0].accumulate_grad(&da);
        }
        Op::Matmul { batch, m, k, n, rhs_batched } => {
            let a = parents[0].value_vec();
            let b = parents[1].value_vec();
            if *rhs_batched {
                if parents[0].requires_grad() {
                    // dA = dC x B^T per block.
                    let mut da = vec![0.0; a.len()];
                    for i in 0..*batch {
                        let bt = transpose_2d(&b[i * k * n..(i + 1) * k * n], *k, *n);
                        mm_nn(
                            &gy[i * m * n..(i + 1) * m * n],
                            &bt,
                            &mut da[i * m * k..(i + 1) * m * k],
                            *m,
                            *n,
                            *k,
                        );
                    }
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    let mut db = vec![0.0; b.len()];
                    for i in 0..*batch {
                        mm_tn(
                            &a[i * m * k..(i + 1) * m * k],
                            &gy[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            *m,
                            *k,
                            *n,
                        );
                    }
                    parents[1].accumulate_grad(&db);
                }
            } else {
                let rows = batch * m;
                if parents[0].requires_grad() {
                    let mut da = vec![0.0; a.len()];
                    let bt = transpose_2d(&b, *k, *n);
                    mm_nn(gy, &bt, &mut da, rows, *n, *k);
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    let mut db = vec![0.0; b.len()];
                    mm_tn(&a, gy, &mut db, rows, *k, *n);
                    parents[1].accumulate_grad(&db);
                }
            }
        }
        Op::Relu => {
            let x = parents[0].value_vec();
            let da: Vec<f64> = gy
                .iter()
                .zip(&x)
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            parents[0].accumulate_grad(&da);
        }
        Op::Reshape => parents[0].accumulate_grad(gy),
        Op::Transpose { a, b } => {
            // Gradient flows through the inverse permutation (same swap).
            let da = permute_swap(gy, y_shape, *a, *b);
            parents[0].accumulate_grad(&da);
        }
        Op::Concat { axis } => {
            let outer: usize = y_shape[..*axis].iter().product();
            let inner: usize = y_shape[*axis + 1..].iter().product();
            let mut offsets = Vec::with_capacity(parents.len());
            let mut total = 0usize;
            for p in parents {
                let rows = p.shape()[*axis];
                offsets.push((total, rows));
                total += rows;
            }
            for (p, (start, rows)) in parents.iter().zip(&offsets) {
                if !p.requires_grad() {
                    continue;
                }
                let block = rows * inner;
                let mut dp = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    dp.extend_from_slice(&gy[base..base + block]);
                }
                p.accumulate_grad(&dp);
            }
        }
        Op::MaskedFill { keep } => {
            let da: Vec<f64> = gy
                .iter()
                .zip(keep.iter())
                .map(|(g, &k)| if k { *g } else { 0.0 })
                .collect();
            parents[0].accumulate_grad(&da);
        }
        Op::Softmax { axis } => {
            let y = y_values.expect("softmax backward needs outputs");
            let (outer, len, inner) = lane_dims(y_shape, *axis);
            let mut da = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        dot += gy[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        da[idx] = y[idx] * (gy[idx] - dot);
                    }
                }
            }
            parents[0].accumulate_grad(&da);
        }
        Op::LogSoftmax { axis } => {
            let y = y_values.expect("log_softmax backward needs outputs");
            let (outer, len, inner) = lane_dims(y_shape, *axis);
            let mut da = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut gsum = 0.0;
                    for j in 0..len {
                        gsum += gy[(o * len + j) * inner + i];
                    }
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        da[idx] = gy[idx] - y[idx].exp() * gsum;
                    }
                }
            }
            parents[0].accumulate_grad(&da);
        }
        Op::LayerNorm { eps } => {
            let x = parents[0].value_vec();
            let g = parents[1].value_vec();
            let d = g.len();
            let rows = x.len() / d;
            let mut dx = vec![0.0; x.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let gyr = &gy[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let dyg: Vec<f64> = gyr.iter().zip(&g).map(|(gv, gg)| gv * gg).collect();
                let mean_dyg = dyg.iter().sum::<f64>() / d as f64;
                let mean_dyg_xhat =
                    dyg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = inv * (dyg[j] - mean_dyg - xhat[j] * mean_dyg_xhat);
                    dgain[j] += gyr[j] * xhat[j];
                    dbias[j] += gyr[j];
                }
            }
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dgain);
            parents[2].accumulate_grad(&dbias);
        }
        Op::Embedding { ids } => {
            let shape = parents[0].shape();
            let d = shape[1];
            let mut dt = vec![0.0; parents[0].numel()];
            for (i, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id * d..(id + 1) * d];
                let src = &gy[i * d..(i + 1) * d];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            parents[0].accumulate_grad(&dt);
        }
        Op::Pick { ids } => {
            let shape = parents[0].shape();
            let c = shape[1];
            let mut da = vec![0.0; parents[0].numel()];
            for (i, &id) in ids.iter().enumerate() {
                da[i * c + id] += gy[i];
            }
            parents[0].accumulate_grad(&da);
        }
        Op::SumAll => {
            let da = vec![gy[0]; parents[0].numel()];
            parents[0].accumulate_grad(&da);
        }
        Op::MeanAll => {
            let n = parents[0].numel().max(1) as f64;
            let da = vec![gy[0] / n; parents[0].numel()];
            parents[0].accumulate_grad(&da);
        }
        Op::SumAxis { axis } => {
            let shape = parents[0].shape();
            let (outer, len, inner) = lane_dims(&shape, *axis);
            let mut da = vec![0.0; parents[0].numel()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        da[(o * len + j) * inner + i] = gy[o * inner + i];
                    }
                }
            }
            parents[0].accumulate_grad(&da);
        }
        Op::Dropout { mask } => {
            let da: Vec<f64> = gy.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
            parents[0].accumulate_grad(&da);
        }
    }
}

/// Sums `raw` over leading positions so it collapses onto a suffix-broadcast
/// operand of `n` elements.
fn fold_to_suffix(raw: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in raw.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}
