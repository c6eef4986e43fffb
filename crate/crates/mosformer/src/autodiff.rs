//! Reverse-mode automatic differentiation over a dynamically built graph.
//!
//! A [`Tensor`] is a shared handle to a node holding flat data, an optional
//! gradient buffer, and the operation that produced it. Running an op builds
//! a new node pointing back at its inputs; [`Tensor::backward`] walks the
//! graph in reverse topological order and accumulates gradients into every
//! node on a path to a trainable leaf.
//!
//! The op set is deliberately small: exactly what the model needs, with no
//! general broadcasting. Shapes are 1-D vectors or 2-D row-major matrices.
//! Repeated `backward` calls without [`Tensor::zero_grad`] accumulate.
//!
//! Graphs are single-threaded; handles are cheap to clone (`Rc`).

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;

pub struct Tensor<F: Real> {
    node: Rc<Node<F>>,
}

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Real> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish_non_exhaustive()
    }
}

struct Node<F: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    /// Trainable leaf.
    requires_grad: bool,
    /// True if some trainable leaf is reachable through this node.
    needs_grad: bool,
    op: Op<F>,
}

enum Op<F: Real> {
    Leaf,
    Add(Tensor<F>, Tensor<F>),
    /// `x[n,d] + row[d]` broadcast over rows.
    AddRow(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Scale(Tensor<F>, F),
    Matmul(Tensor<F>, Tensor<F>),
    Transpose(Tensor<F>),
    SoftmaxRows(Tensor<F>),
    LayerNorm {
        x: Tensor<F>,
        gain: Tensor<F>,
        bias: Tensor<F>,
        x_hat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(Tensor<F>),
    ConcatRows(Vec<Tensor<F>>),
    SliceRows {
        x: Tensor<F>,
        start: usize,
    },
    /// Each source row repeated `times` consecutively.
    RepeatRows(Tensor<F>, usize),
    CrossEntropy {
        logits: Tensor<F>,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Tensor<F>),
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

impl<F: Real> Tensor<F> {
    fn new(shape: Vec<usize>, data: Vec<F>, requires_grad: bool, needs_grad: bool, op: Op<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Input(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, false, Op::Leaf))
    }

    /// Trainable leaf: participates in `backward` and optimizer updates.
    pub fn parameter(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Input(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![F::zero(); n], false, false, Op::Leaf)
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v], false, false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Usage(format!("{op}: expected 2-D tensor, got {other:?}"))),
        }
    }

    /// Borrow the underlying data. Single-threaded interior mutability; do not
    /// hold across calls that may mutate the same tensor.
    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.node.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.borrow().clone()
    }

    /// Replace the stored values (shape is fixed).
    pub fn set_data(&self, data: Vec<F>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Input(format!(
                "set_data: length {} does not match shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    /// Nudge a single coordinate in place (used by finite differencing).
    pub fn nudge(&self, index: usize, delta: F) {
        let mut d = self.node.data.borrow_mut();
        d[index] = d[index] + delta;
    }

    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item: expected scalar, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros (marking it populated).
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = Some(vec![F::zero(); self.numel()]);
    }

    /// Drop the gradient buffer entirely.
    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn add_to_grad(&self, contribution: &[F]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (dst, src) in existing.iter_mut().zip(contribution) {
                    *dst = *dst + *src;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    // ---- ops ------------------------------------------------------------

    fn unary(&self, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Tensor<F> {
        Tensor::new(shape, data, false, self.node.needs_grad, op)
    }

    fn binary(&self, rhs: &Tensor<F>, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Tensor<F> {
        let needs = self.node.needs_grad || rhs.node.needs_grad;
        Tensor::new(shape, data, false, needs, op)
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape().to_vec(),
                right: rhs.shape().to_vec(),
            });
        }
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(self.binary(rhs, self.shape().to_vec(), data, Op::Add(self.clone(), rhs.clone())))
    }

    /// `x[n,d] + bias[d]`, the bias broadcast over rows.
    pub fn add_row(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, d) = self.dims2("add_row")?;
        if bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for i in 0..n {
                for (dst, &bv) in data[i * d..(i + 1) * d].iter_mut().zip(b.iter()) {
                    *dst = *dst + bv;
                }
            }
        }
        Ok(self.binary(bias, vec![n, d], data, Op::AddRow(self.clone(), bias.clone())))
    }

    /// Element-wise product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape().to_vec(),
                right: rhs.shape().to_vec(),
            });
        }
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(self.binary(rhs, self.shape().to_vec(), data, Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x * c).collect();
        self.unary(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm(&self.data(), &rhs.data(), &mut out, m, k, n);
        Ok(self.binary(rhs, vec![m, n], out, Op::Matmul(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.dims2("transpose")?;
        let data = transpose_buf(&self.data(), r, c);
        Ok(self.unary(vec![c, r], data, Op::Transpose(self.clone())))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<F>> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = vec![F::zero(); r * c];
        {
            let x = self.data();
            if x.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("softmax_rows: NaN input".into()));
            }
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let out_row = &mut out[i * c..(i + 1) * c];
                softmax_into(row, out_row);
            }
        }
        Ok(self.unary(vec![r, c], out, Op::SoftmaxRows(self.clone())))
    }

    /// Per-row layer normalization with affine gain/bias over dimension `d`.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let (n, d) = match self.node.shape.as_slice() {
            [d] => (1usize, *d),
            [n, d] => (*n, *d),
            other => {
                return Err(Error::Usage(format!(
                    "layer_norm: expected 1-D or 2-D tensor, got {other:?}"
                )))
            }
        };
        if d == 0 {
            return Err(Error::Config("layer_norm: normalized dimension is 0".into()));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); n * d];
        let mut x_hat = vec![F::zero(); n * d];
        let mut inv_std = vec![F::zero(); n];
        {
            let x = self.data();
            let g = gain.data();
            let b = bias.data();
            let dn = F::from_f64(d as f64);
            for i in 0..n {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().copied().sum::<F>() / dn;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<F>()
                    / dn;
                let inv = (var + eps).sqrt().recip();
                inv_std[i] = inv;
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    x_hat[i * d + j] = xh;
                    out[i * d + j] = g[j] * xh + b[j];
                }
            }
        }
        let needs = self.node.needs_grad || gain.node.needs_grad || bias.node.needs_grad;
        Ok(Tensor::new(
            self.shape().to_vec(),
            out,
            false,
            needs,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                x_hat,
                inv_std,
            },
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor<F> {
        let c0 = F::from_f64(GELU_C0);
        let c1 = F::from_f64(GELU_C1);
        let half = F::from_f64(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        self.unary(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows: empty input".into()));
        }
        let (_, d) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_rows")?;
            if c != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let needs = parts.iter().any(|p| p.node.needs_grad);
        Ok(Tensor::new(
            vec![rows, d],
            data,
            false,
            needs,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Rows `start..end` as a new `[end-start, d]` tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<F>> {
        let (n, d) = self.dims2("slice_rows")?;
        if start >= end || end > n {
            return Err(Error::Usage(format!(
                "slice_rows: range {start}..{end} out of bounds for {n} rows"
            )));
        }
        let data = self.data()[start * d..end * d].to_vec();
        Ok(self.unary(
            vec![end - start, d],
            data,
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Each row repeated `times` consecutively: `[n,d] -> [n*times,d]`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor<F>> {
        let (n, d) = self.dims2("repeat_rows")?;
        if times == 0 {
            return Err(Error::Usage("repeat_rows: times must be >= 1".into()));
        }
        let mut data = Vec::with_capacity(n * times * d);
        {
            let x = self.data();
            for i in 0..n {
                for _ in 0..times {
                    data.extend_from_slice(&x[i * d..(i + 1) * d]);
                }
            }
        }
        Ok(self.unary(vec![n * times, d], data, Op::RepeatRows(self.clone(), times)))
    }

    /// Mean negative log-softmax at the label indices, via log-sum-exp.
    pub fn cross_entropy(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        let (b, c) = logits.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "cross_entropy: {} labels for {} logit rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![F::zero(); b * c];
        let mut total = F::zero();
        {
            let z = logits.data();
            for i in 0..b {
                let row = &z[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut denom = F::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[i * c + j] = e;
                    denom = denom + e;
                }
                for p in &mut probs[i * c..(i + 1) * c] {
                    *p = *p / denom;
                }
                let lse = max + denom.ln();
                total = total + (lse - row[labels[i]]);
            }
        }
        let loss = total / F::from_f64(b as f64);
        Ok(Tensor::new(
            vec![1],
            vec![loss],
            false,
            logits.node.needs_grad,
            Op::CrossEntropy {
                logits: logits.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor<F> {
        let s = self.data().iter().copied().sum();
        self.unary(vec![1], vec![s], Op::Sum(self.clone()))
    }

    // ---- backward -------------------------------------------------------

    fn children(&self) -> Vec<Tensor<F>> {
        match &self.node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::RepeatRows(a, _)
            | Op::Sum(a) => vec![a.clone()],
            Op::LayerNorm { x, gain, bias, .. } => vec![x.clone(), gain.clone(), bias.clone()],
            Op::ConcatRows(parts) => parts.clone(),
            Op::SliceRows { x, .. } => vec![x.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }

    /// Populate gradients of every trainable tensor reachable from this
    /// scalar. Gradients accumulate across calls until reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.needs_grad {
            return Ok(());
        }
        // Iterative post-order DFS: children appear before their consumers.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<*const Node<F>> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let ptr = Rc::as_ptr(&t.node);
            if !visited.insert(ptr) {
                continue;
            }
            stack.push((t.clone(), true));
            for child in t.children() {
                if child.node.needs_grad && !visited.contains(&Rc::as_ptr(&child.node)) {
                    stack.push((child, false));
                }
            }
        }
        // Intermediate grads are scratch for this pass; only leaf grads
        // accumulate across repeated backward calls.
        for t in &order {
            if !matches!(t.node.op, Op::Leaf) {
                *t.node.grad.borrow_mut() = None;
            }
        }
        self.add_to_grad(&[F::one()]);
        for t in order.iter().rev() {
            t.backprop_step();
        }
        Ok(())
    }

    fn backprop_step(&self) {
        let grad = match self.node.grad.borrow().clone() {
            Some(g) => g,
            None => return,
        };
        let needs = |t: &Tensor<F>| t.node.needs_grad;
        match &self.node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    a.add_to_grad(&grad);
                }
                if needs(b) {
                    b.add_to_grad(&grad);
                }
            }
            Op::AddRow(x, bias) => {
                if needs(x) {
                    x.add_to_grad(&grad);
                }
                if needs(bias) {
                    let d = bias.numel();
                    let mut db = vec![F::zero(); d];
                    for row in grad.chunks_exact(d) {
                        for (dst, &g) in db.iter_mut().zip(row) {
                            *dst = *dst + g;
                        }
                    }
                    bias.add_to_grad(&db);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bd = b.data();
                    let da: Vec<F> = grad.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                    drop(bd);
                    a.add_to_grad(&da);
                }
                if needs(b) {
                    let ad = a.data();
                    let db: Vec<F> = grad.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                    drop(ad);
                    b.add_to_grad(&db);
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    let da: Vec<F> = grad.iter().map(|&g| g * *c).collect();
                    a.add_to_grad(&da);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(a) {
                    // dA = dC . B^T
                    let bt = transpose_buf(&b.data(), k, n);
                    let mut da = vec![F::zero(); m * k];
                    gemm(&grad, &bt, &mut da, m, n, k);
                    a.add_to_grad(&da);
                }
                if needs(b) {
                    // dB = A^T . dC
                    let at = transpose_buf(&a.data(), m, k);
                    let mut db = vec![F::zero(); k * n];
                    gemm(&at, &grad, &mut db, k, m, n);
                    b.add_to_grad(&db);
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    let (c, r) = (self.shape()[0], self.shape()[1]);
                    a.add_to_grad(&transpose_buf(&grad, c, r));
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    let (r, c) = (self.shape()[0], self.shape()[1]);
                    let s = self.data();
                    let mut da = vec![F::zero(); r * c];
                    for i in 0..r {
                        let srow = &s[i * c..(i + 1) * c];
                        let grow = &grad[i * c..(i + 1) * c];
                        let dot = srow
                            .iter()
                            .zip(grow)
                            .map(|(&sv, &gv)| sv * gv)
                            .sum::<F>();
                        for j in 0..c {
                            da[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    drop(s);
                    a.add_to_grad(&da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let d = gain.numel();
                let n = x.numel() / d;
                let dn = F::from_f64(d as f64);
                if needs(gain) {
                    let mut dg = vec![F::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] = dg[j] + grad[i * d + j] * x_hat[i * d + j];
                        }
                    }
                    gain.add_to_grad(&dg);
                }
                if needs(bias) {
                    let mut db = vec![F::zero(); d];
                    for row in grad.chunks_exact(d) {
                        for (dst, &g) in db.iter_mut().zip(row) {
                            *dst = *dst + g;
                        }
                    }
                    bias.add_to_grad(&db);
                }
                if needs(x) {
                    let g = gain.data();
                    let mut dx = vec![F::zero(); n * d];
                    for i in 0..n {
                        let gh: Vec<F> = (0..d).map(|j| grad[i * d + j] * g[j]).collect();
                        let mean_gh = gh.iter().copied().sum::<F>() / dn;
                        let mean_gh_xhat = gh
                            .iter()
                            .zip(&x_hat[i * d..(i + 1) * d])
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / dn;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i]
                                * (gh[j] - mean_gh - x_hat[i * d + j] * mean_gh_xhat);
                        }
                    }
                    drop(g);
                    x.add_to_grad(&dx);
                }
            }
            Op::Gelu(a) => {
                if needs(a) {
                    let c0 = F::from_f64(GELU_C0);
                    let c1 = F::from_f64(GELU_C1);
                    let half = F::from_f64(0.5);
                    let three = F::from_f64(3.0);
                    let ad = a.data();
                    let da: Vec<F> = ad
                        .iter()
                        .zip(grad.iter())
                        .map(|(&x, &g)| {
                            let u = c0 * (x + c1 * x * x * x);
                            let t = u.tanh();
                            let du = c0 * (F::one() + three * c1 * x * x);
                            let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * du;
                            g * dy
                        })
                        .collect();
                    drop(ad);
                    a.add_to_grad(&da);
                }
            }
            Op::ConcatRows(parts) => {
                let d = self.shape()[1];
                let mut row = 0;
                for p in parts {
                    let r = p.shape()[0];
                    if needs(p) {
                        p.add_to_grad(&grad[row * d..(row + r) * d]);
                    }
                    row += r;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(x) {
                    let d = self.shape()[1];
                    let mut dx = vec![F::zero(); x.numel()];
                    dx[start * d..start * d + grad.len()].copy_from_slice(&grad);
                    x.add_to_grad(&dx);
                }
            }
            Op::RepeatRows(a, times) => {
                if needs(a) {
                    let d = self.shape()[1];
                    let n = a.shape()[0];
                    let mut da = vec![F::zero(); n * d];
                    for i in 0..n {
                        for rep in 0..*times {
                            let src = &grad[(i * times + rep) * d..(i * times + rep + 1) * d];
                            for (dst, &g) in da[i * d..(i + 1) * d].iter_mut().zip(src) {
                                *dst = *dst + g;
                            }
                        }
                    }
                    a.add_to_grad(&da);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(logits) {
                    let b = labels.len();
                    let c = logits.shape()[1];
                    let g = grad[0] / F::from_f64(b as f64);
                    let mut dz = vec![F::zero(); b * c];
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == label { F::one() } else { F::zero() };
                            dz[i * c + j] = g * (probs[i * c + j] - indicator);
                        }
                    }
                    logits.add_to_grad(&dz);
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let da = vec![grad[0]; a.numel()];
                    a.add_to_grad(&da);
                }
            }
        }
    }
}

/// `c += a . b` with `a[m,k]`, `b[k,n]`, row-major, contiguous inner loop.
fn gemm<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

fn transpose_buf<F: Real>(src: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

fn softmax_into<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut denom = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom = denom + e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}
