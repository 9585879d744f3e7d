use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::numerics::flops;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations, so intermediate tensors carry no
/// graph even when their inputs are trainable parameters.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Dense row-major array of `f64` with an optional gradient.
///
/// Cloning is cheap (reference counted). Data is immutable after creation;
/// only the gradient buffer is written, during [`Tensor::backward`].
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

enum Op {
    MatMul { a: Tensor, b: Tensor, trans_b: bool },
    Add(Tensor, Tensor),
    AddBias(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MulConst(Tensor, Vec<f64>),
    Scale(Tensor, f64),
    Gelu(Tensor),
    Softmax { x: Tensor, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    NllRows { logits: Tensor, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Tensor),
    WeightedSum(Tensor, Vec<f64>),
    GatherRows(Tensor, Vec<usize>),
    ScatterRows { base: Tensor, idx: Vec<usize>, rows: Tensor },
    SliceCols { x: Tensor, start: usize },
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MulConst(x, _)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::WeightedSum(x, _)
            | Op::GatherRows(x, _) => vec![x],
            Op::Softmax { x, .. } | Op::SliceCols { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::NllRows { logits, .. } => vec![logits],
            Op::ScatterRows { base, rows, .. } => vec![base, rows],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().collect(),
        }
    }
}

/// C = A·B (or A·Bᵀ) accumulated as `c = a·b + beta·c`, with explicit
/// strides. Adds `2·m·k·n` to the FLOP counter.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    flops::add(2 * (m * k * n) as u64);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the slices cover the index ranges described by (m, k, n) and
    // the strides; callers derive both from checked tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Builds an op result; the graph edge is kept only when gradients are
    /// enabled and some input is trainable.
    fn derived(data: Vec<f64>, shape: Vec<usize>, inputs: &[&Tensor], op: impl FnOnce() -> Op) -> Tensor {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Tensor::make(data, shape, true, Some(op()))
        } else {
            Tensor::make(data, shape, false, None)
        }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!("shape {shape:?} must have positive dimensions")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "new",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::make(vec![0.0; numel], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![value], vec![1], false, None)
    }

    /// A fresh leaf with the same data and the given trainability.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::make(self.0.data.clone(), self.0.shape.clone(), requires_grad, None)
    }

    pub fn detach(&self) -> Tensor {
        self.with_requires_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Leading dimensions flattened.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    fn accumulate(&self, f: impl FnOnce(&mut [f64])) {
        if !self.0.requires_grad {
            return;
        }
        let mut guard = self.0.grad.lock().expect("grad lock");
        let buf = guard.get_or_insert_with(|| vec![0.0; self.0.data.len()]);
        f(buf);
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    /// Matrix product `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k as isize, 1), other.data(), (n as isize, 1), &mut out, 0.0);
        Ok(Tensor::derived(out, vec![m, n], &[self, other], || Op::MatMul {
            a: self.clone(),
            b: other.clone(),
            trans_b: false,
        }))
    }

    /// `[m×k]·[n×k]ᵀ → [m×n]`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul_t")?;
        let (n, k2) = other.expect_2d("matmul_t")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k as isize, 1), other.data(), (1, k as isize), &mut out, 0.0);
        Ok(Tensor::derived(out, vec![m, n], &[self, other], || Op::MatMul {
            a: self.clone(),
            b: other.clone(),
            trans_b: true,
        }))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::derived(out, self.shape().to_vec(), &[self, other], || {
            Op::Add(self.clone(), other.clone())
        }))
    }

    /// Adds a length-`n` vector to every row of a `[.. × n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if bias.numel() != n {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(Tensor::derived(out, self.shape().to_vec(), &[self, bias], || {
            Op::AddBias(self.clone(), bias.clone())
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::derived(out, self.shape().to_vec(), &[self, other], || {
            Op::Mul(self.clone(), other.clone())
        }))
    }

    /// Elementwise product with a constant (non-trainable) array.
    pub fn mul_const(&self, factors: Vec<f64>) -> Result<Tensor> {
        if factors.len() != self.numel() {
            return Err(Error::Dimension {
                op: "mul_const",
                left: self.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let out = self.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        Ok(Tensor::derived(out, self.shape().to_vec(), &[self], || {
            Op::MulConst(self.clone(), factors)
        }))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|a| a * factor).collect();
        Tensor::derived(out, self.shape().to_vec(), &[self], || Op::Scale(self.clone(), factor))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| gelu_fwd(x)).collect();
        Tensor::derived(out, self.shape().to_vec(), &[self], || Op::Gelu(self.clone()))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        Ok(Tensor::derived(out, shape.to_vec(), &[self], || Op::Softmax {
            x: self.clone(),
            outer,
            len,
            inner,
        }))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm epsilon must be positive"));
        }
        let n = self.cols();
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let rows = self.rows();
        let mut xhat = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(self.numel());
        let (g, b) = (gain.data(), bias.data());
        for row in self.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        Ok(Tensor::derived(out, self.shape().to_vec(), &[self, gain, bias], || Op::LayerNorm {
            x: self.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            xhat,
            inv_std,
        }))
    }

    /// Per-row negative log-likelihood `−log softmax(row)[target]`, shape `[n]`.
    pub fn nll_rows(&self, targets: &[usize]) -> Result<Tensor> {
        let (n, v) = self.expect_2d("nll_rows")?;
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "nll_rows",
                left: self.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index { index: bad, size: v });
        }
        let mut probs = vec![0.0; n * v];
        let mut out = Vec::with_capacity(n);
        for (r, row) in self.data().chunks_exact(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for (j, x) in row.iter().enumerate() {
                probs[r * v + j] = (x - lse).exp();
            }
            out.push(lse - row[targets[r]]);
        }
        Ok(Tensor::derived(out, vec![n], &[self], || Op::NllRows {
            logits: self.clone(),
            targets: targets.to_vec(),
            probs,
        }))
    }

    /// Mean negative log-likelihood over rows.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let nll = self.nll_rows(targets)?;
        let n = nll.numel();
        Ok(nll.sum().scale(1.0 / n as f64))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::derived(vec![s], vec![1], &[self], || Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn weighted_sum(&self, weights: Vec<f64>) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                left: self.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = self.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(Tensor::derived(vec![s], vec![1], &[self], || Op::WeightedSum(self.clone(), weights)))
    }

    /// Selects rows of a 2-D tensor (embedding lookup, active-row subsets).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_2d("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows needs at least one index"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, size: r });
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Tensor::derived(out, vec![idx.len(), c], &[self], || {
            Op::GatherRows(self.clone(), idx.to_vec())
        }))
    }

    /// Copy of `self` with rows `idx[j]` replaced by row `j` of `rows`.
    /// Rows not listed are copied bit-for-bit.
    pub fn scatter_rows(&self, idx: &[usize], rows: &Tensor) -> Result<Tensor> {
        let (r, c) = self.expect_2d("scatter_rows")?;
        let (n, c2) = rows.expect_2d("scatter_rows")?;
        if c != c2 || n != idx.len() {
            return Err(Error::Dimension {
                op: "scatter_rows",
                left: self.shape().to_vec(),
                right: rows.shape().to_vec(),
            });
        }
        let mut seen = vec![false; r];
        let mut out = self.data().to_vec();
        for (j, &i) in idx.iter().enumerate() {
            if i >= r {
                return Err(Error::Index { index: i, size: r });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("scatter_rows index {i} repeated")));
            }
            out[i * c..(i + 1) * c].copy_from_slice(rows.row(j));
        }
        Ok(Tensor::derived(out, vec![r, c], &[self, rows], || Op::ScatterRows {
            base: self.clone(),
            idx: idx.to_vec(),
            rows: rows.clone(),
        }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::contract(format!("slice_cols {start}+{len} exceeds width {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(Tensor::derived(out, vec![r, len], &[self], || Op::SliceCols {
            x: self.clone(),
            start,
        }))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (r, _) = first.expect_2d("concat_cols")?;
        let mut width = 0;
        for p in parts {
            let (pr, pc) = p.expect_2d("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            width += pc;
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::derived(out, vec![r, width], &refs, || Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = first.expect_2d("concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = p.expect_2d("concat_rows")?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::derived(out, vec![rows, c], &refs, || Op::ConcatRows(parts.to_vec())))
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Reverse-mode differentiation from a scalar loss. Populates `grad` on
    /// every trainable tensor reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract("loss is not connected to any trainable tensor"));
        }
        Tape::record(self).run(self);
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish_non_exhaustive()
    }
}

/// Operations reachable from a loss, in topological order (inputs first).
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Arc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&Arc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn run(self, root: &Tensor) {
        root.accumulate(|g| g[0] += 1.0);
        for t in self.order.iter().rev() {
            let Some(op) = &t.0.op else { continue };
            let Some(g) = t.0.grad.lock().expect("grad lock").take() else { continue };
            propagate(op, &t.0, &g);
        }
    }
}

fn propagate(op: &Op, out: &Node, g: &[f64]) {
    match op {
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = out.shape[1];
            if !trans_b {
                // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                a.accumulate(|ga| gemm(m, n, k, g, (n as isize, 1), b.data(), (1, n as isize), ga, 1.0));
                b.accumulate(|gb| gemm(k, m, n, a.data(), (1, k as isize), g, (n as isize, 1), gb, 1.0));
            } else {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                a.accumulate(|ga| gemm(m, n, k, g, (n as isize, 1), b.data(), (k as isize, 1), ga, 1.0));
                b.accumulate(|gb| gemm(n, m, k, g, (1, n as isize), a.data(), (k as isize, 1), gb, 1.0));
            }
        }
        Op::Add(a, b) => {
            a.accumulate(|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            b.accumulate(|gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::AddBias(a, bias) => {
            a.accumulate(|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            let n = bias.numel();
            bias.accumulate(|gb| {
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::Mul(a, b) => {
            a.accumulate(|ga| {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(b.data()) {
                    *x += y * w;
                }
            });
            b.accumulate(|gb| {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(a.data()) {
                    *x += y * w;
                }
            });
        }
        Op::MulConst(a, factors) => a.accumulate(|ga| {
            for ((x, y), w) in ga.iter_mut().zip(g).zip(factors) {
                *x += y * w;
            }
        }),
        Op::Scale(a, c) => a.accumulate(|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c)),
        Op::Gelu(a) => a.accumulate(|ga| {
            for ((x, y), v) in ga.iter_mut().zip(g).zip(a.data()) {
                *x += y * gelu_grad(*v);
            }
        }),
        Op::Softmax { x, outer, len, inner } => {
            let y = &out.data;
            x.accumulate(|gx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let n = gain.numel();
            let gd = gain.data();
            gain.accumulate(|gg| {
                for (row_g, row_x) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] += row_g[j] * row_x[j];
                    }
                }
            });
            bias.accumulate(|gb| {
                for row_g in g.chunks_exact(n) {
                    gb.iter_mut().zip(row_g).for_each(|(x, y)| *x += y);
                }
            });
            x.accumulate(|gx| {
                let nf = n as f64;
                for (r, (row_g, row_x)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = row_g[j] * gd[j];
                        sum_d += d;
                        sum_dx += d * row_x[j];
                    }
                    let out_row = &mut gx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let d = row_g[j] * gd[j];
                        out_row[j] += inv_std[r] / nf * (nf * d - sum_d - row_x[j] * sum_dx);
                    }
                }
            });
        }
        Op::NllRows { logits, targets, probs } => {
            let v = logits.cols();
            logits.accumulate(|gl| {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] += g[r] * probs[r * v + j];
                    }
                    row[t] -= g[r];
                }
            });
        }
        Op::Sum(a) => a.accumulate(|ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::WeightedSum(a, w) => a.accumulate(|ga| {
            for (x, wi) in ga.iter_mut().zip(w) {
                *x += g[0] * wi;
            }
        }),
        Op::GatherRows(x, idx) => {
            let c = x.cols();
            x.accumulate(|gx| {
                for (j, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        gx[i * c + k] += g[j * c + k];
                    }
                }
            });
        }
        Op::ScatterRows { base, idx, rows } => {
            let c = base.cols();
            base.accumulate(|gb| {
                let mut replaced = vec![false; base.rows()];
                for &i in idx {
                    replaced[i] = true;
                }
                for (r, skip) in replaced.iter().enumerate() {
                    if !skip {
                        for k in 0..c {
                            gb[r * c + k] += g[r * c + k];
                        }
                    }
                }
            });
            rows.accumulate(|gr| {
                for (j, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        gr[j * c + k] += g[i * c + k];
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let c = x.cols();
            let w = out.shape[1];
            x.accumulate(|gx| {
                for (r, row_g) in g.chunks_exact(w).enumerate() {
                    for k in 0..w {
                        gx[r * c + start + k] += row_g[k];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let width = out.shape[1];
            let mut offset = 0;
            for p in parts {
                let pc = p.cols();
                p.accumulate(|gp| {
                    for (r, row_g) in g.chunks_exact(width).enumerate() {
                        for k in 0..pc {
                            gp[r * pc + k] += row_g[offset + k];
                        }
                    }
                });
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.numel();
                p.accumulate(|gp| {
                    gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y);
                });
                offset += n;
            }
        }
    }
}
