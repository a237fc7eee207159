//! Reverse-mode automatic differentiation on a tape of tensor ops.
//!
//! A [`Graph`] owns a flat list of nodes; every op evaluates eagerly at
//! insertion and records its inputs, so [`Graph::backward`] is a single
//! reverse sweep over the tape. Node handles ([`Var`]) are plain indices.
//! The tape is built per forward pass and discarded afterwards; parameters
//! enter as leaves and their gradients are read back out after the sweep.
//!
//! Evaluation order is fixed everywhere, so identical inputs produce
//! bitwise-identical values and gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Recorded operation producing a node's value.
#[derive(Debug, Clone)]
enum Op {
    /// Input tensor (parameter or constant).
    Leaf,
    /// Elementwise a + b (same shape).
    Add(Var, Var),
    /// Row-broadcast add: [r, c] + [c].
    AddBias(Var, Var),
    /// Multiply by a compile-time constant.
    Scale(Var, f64),
    /// Elementwise multiply by a constant tensor (dropout masks).
    ElemMul(Var, Tensor),
    /// [m, k] x [k, n].
    Matmul(Var, Var),
    /// [m, k] x [n, k]^T.
    MatmulNT(Var, Var),
    /// Columns [start, start+len) of a 2-d tensor.
    SliceCols(Var, usize, usize),
    /// Horizontal concatenation of 2-d tensors with equal row counts.
    ConcatCols(Vec<Var>),
    /// Row lookup: out[i] = table[ids[i]].
    GatherRows(Var, Vec<usize>),
    /// Replace rows where mask[i] with a learned fill vector [c].
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    /// Stack consecutive row groups: [t, d] -> [⌈t/stride⌉, stride*d], the
    /// last group zero-padded.
    FrameStack { x: Var },
    /// Row-wise softmax of a 2-d tensor.
    Softmax(Var),
    /// Row-wise layer norm with affine parameters gamma, beta of shape [c].
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Gaussian error linear unit (tanh form), elementwise.
    Gelu(Var),
    /// Sum over rows of -log softmax(logits)[target]: scalar.
    CeSumRows { logits: Var, targets: Vec<usize> },
    /// Sum over elements of 0.5 * (pred - target)^2 against a constant: scalar.
    HalfSqSum { pred: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Tape of eagerly evaluated tensor ops supporting one reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    let c = libm::sqrt(2.0 / core::f64::consts::PI);
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = libm::sqrt(2.0 / core::f64::consts::PI);
    let u = c * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax into `out`, numerically stabilized by the row max.
fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            let e = libm::exp(v - m);
            *o = e;
            z += e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert an input tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Graph::backward`], if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            expected: self.nodes[a.0].value.shape().to_vec(),
            got: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        if self.nodes[bias.0].value.numel() != c {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(av[i * c + j] + bv[j]);
            }
        }
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)
            .expect("scale preserves shape");
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise multiply by a constant mask of the same shape.
    pub fn elem_mul(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        if self.nodes[a.0].value.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "elem_mul",
                expected: self.nodes[a.0].value.shape().to_vec(),
                got: mask.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(mask.data().iter())
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(mask.shape().to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::ElemMul(a, mask), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let (k2, n) = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// a[m, k] x b[n, k]^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let (n, k2) = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatmulNT(a, b), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                expected: vec![r, c],
                got: vec![start, len],
            });
        }
        let av = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::SliceCols(a, start, len), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput(alloc::string::String::from("concat_cols")));
        }
        let r = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            if self.nodes[p.0].value.rows() != r {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += self.nodes[p.0].value.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// out[i, :] = table[ids[i], :].
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = (self.nodes[table.0].value.rows(), self.nodes[table.0].value.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Vocabulary { code: bad, vocab: r });
        }
        let tv = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.requires(table);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Replace rows flagged in `mask` with the learned fill vector.
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if mask.len() != r || self.nodes[fill.0].value.numel() != c {
            return Err(self.shape_err("mask_rows", x, fill));
        }
        let xv = self.nodes[x.0].value.data();
        let fv = self.nodes[fill.0].value.data();
        let mut data = Vec::with_capacity(r * c);
        for (i, &masked) in mask.iter().enumerate() {
            if masked {
                data.extend_from_slice(fv);
            } else {
                data.extend_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.requires(x) || self.requires(fill);
        Ok(self.push(value, Op::MaskRows { x, fill, mask: mask.to_vec() }, rg))
    }

    /// Stack `stride` consecutive rows into one: [t, d] -> [ceil(t/stride),
    /// stride*d], zero-padding the final group when t is not a multiple.
    pub fn frame_stack(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (t, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if stride == 0 || t == 0 {
            return Err(Error::InsufficientData { needed: 1, got: t.min(stride) });
        }
        let t2 = t.div_ceil(stride);
        let xv = self.nodes[x.0].value.data();
        let mut data = vec![0.0; t2 * stride * d];
        data[..t * d].copy_from_slice(&xv[..t * d]);
        let value = Tensor::new(vec![t2, stride * d], data)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::FrameStack { x }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let mut out = vec![0.0; r * c];
        softmax_rows(self.nodes[a.0].value.data(), r, c, &mut out);
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), out)
            .expect("softmax preserves shape");
        let rg = self.requires(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        if self.nodes[gamma.0].value.numel() != c || self.nodes[beta.0].value.numel() != c {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for j in 0..c {
                data[i * c + j] = gv[j] * (row[j] - mean) * inv + bv[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)
            .expect("gelu preserves shape");
        let rg = self.requires(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Sum over rows of the cross-entropy -log softmax(logits[i])[targets[i]].
    pub fn ce_sum_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = (self.nodes[logits.0].value.rows(), self.nodes[logits.0].value.cols());
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "ce_sum_rows",
                expected: vec![r],
                got: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Vocabulary { code: bad, vocab: c });
        }
        let lv = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
            total += m + libm::log(z) - row[y];
        }
        let value = Tensor::scalar(total);
        let rg = self.requires(logits);
        Ok(self.push(value, Op::CeSumRows { logits, targets: targets.to_vec() }, rg))
    }

    /// Sum over elements of 0.5 * (pred - target)^2 against a constant target.
    pub fn half_sq_sum(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        if self.nodes[pred.0].value.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "half_sq_sum",
                expected: self.nodes[pred.0].value.shape().to_vec(),
                got: target.shape().to_vec(),
            });
        }
        let total: f64 = self.nodes[pred.0]
            .value
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(p, t)| 0.5 * (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(total);
        let rg = self.requires(pred);
        Ok(self.push(value, Op::HalfSqSum { pred, target }, rg))
    }

    fn acc(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
            *gi += ci;
        }
    }

    /// Reverse sweep from a scalar loss node. `seed` is the upstream gradient
    /// (1.0 for a plain loss; a batch weight when averaging across graphs).
    pub fn backward(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: vec![1],
                got: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &gout);
            // Leaves keep their gradient for the caller to read.
            if matches!(op, Op::Leaf) {
                self.nodes[i].grad = Some(gout);
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, out: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, gout);
                self.acc(*b, gout);
            }
            Op::AddBias(a, bias) => {
                self.acc(*a, gout);
                if self.requires(*bias) {
                    let c = self.nodes[bias.0].value.numel();
                    let mut gb = vec![0.0; c];
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % c] += g;
                    }
                    self.acc(*bias, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.acc(*a, &ga);
            }
            Op::ElemMul(a, mask) => {
                let ga: Vec<f64> =
                    gout.iter().zip(mask.data().iter()).map(|(g, m)| g * m).collect();
                self.acc(*a, &ga);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if self.requires(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(gout, self.nodes[b.0].value.data(), m, n, k, &mut ga);
                    self.acc(*a, &ga);
                }
                if self.requires(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn(self.nodes[a.0].value.data(), gout, k, m, n, &mut gb);
                    self.acc(*b, &gb);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.rows();
                if self.requires(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nn(gout, self.nodes[b.0].value.data(), m, n, k, &mut ga);
                    self.acc(*a, &ga);
                }
                if self.requires(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn(gout, self.nodes[a.0].value.data(), n, m, k, &mut gb);
                    self.acc(*b, &gb);
                }
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                self.acc(*a, &ga);
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[out].value.rows();
                let total = self.nodes[out].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if self.requires(p) {
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&gout[i * total + offset..i * total + offset + c]);
                        }
                        self.acc(p, &gp);
                    }
                    offset += c;
                }
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = (self.nodes[table.0].value.rows(), self.nodes[table.0].value.cols());
                let mut gt = vec![0.0; r * c];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += gout[i * c + j];
                    }
                }
                self.acc(*table, &gt);
            }
            Op::MaskRows { x, fill, mask } => {
                let c = self.nodes[fill.0].value.numel();
                if self.requires(*x) {
                    let mut gx = gout.to_vec();
                    for (i, &masked) in mask.iter().enumerate() {
                        if masked {
                            gx[i * c..(i + 1) * c].fill(0.0);
                        }
                    }
                    self.acc(*x, &gx);
                }
                if self.requires(*fill) {
                    let mut gf = vec![0.0; c];
                    for (i, &masked) in mask.iter().enumerate() {
                        if masked {
                            for j in 0..c {
                                gf[j] += gout[i * c + j];
                            }
                        }
                    }
                    self.acc(*fill, &gf);
                }
            }
            Op::FrameStack { x } => {
                // Row r*stride+s of the input feeds columns [s*d, (s+1)*d) of
                // output row r; the zero-padded tail has no input to feed.
                let (t, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                self.acc(*x, &gout[..t * d]);
            }
            Op::Softmax(a) => {
                let (r, c) = (self.nodes[out].value.rows(), self.nodes[out].value.cols());
                let y = self.nodes[out].value.clone();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &gout[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let row = &xv.data()[i * c..(i + 1) * c];
                    let gr = &gout[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    // xhat_j = (x_j - mean) * inv
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = gr[j] * gv.data()[j];
                        gg[j] += gr[j] * xhat;
                        gb[j] += gr[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = gr[j] * gv.data()[j];
                        gx[i * c + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.acc(*x, &gx);
                self.acc(*gamma, &gg);
                self.acc(*beta, &gb);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(gout.iter())
                    .map(|(&x, g)| g * gelu_grad_scalar(x))
                    .collect();
                self.acc(*a, &ga);
            }
            Op::CeSumRows { logits, targets } => {
                let (r, c) = (self.nodes[logits.0].value.rows(), self.nodes[logits.0].value.cols());
                let lv = self.nodes[logits.0].value.clone();
                let g = gout[0];
                let mut gl = vec![0.0; r * c];
                softmax_rows(lv.data(), r, c, &mut gl);
                for (i, &y) in targets.iter().enumerate() {
                    gl[i * c + y] -= 1.0;
                }
                for v in &mut gl {
                    *v *= g;
                }
                self.acc(*logits, &gl);
            }
            Op::HalfSqSum { pred, target } => {
                let g = gout[0];
                let gp: Vec<f64> = self.nodes[pred.0]
                    .value
                    .data()
                    .iter()
                    .zip(target.data().iter())
                    .map(|(p, t)| g * (p - t))
                    .collect();
                self.acc(*pred, &gp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of a scalar-valued builder with respect to
    /// one leaf tensor, compared elementwise against the analytic gradient.
    fn check<F>(build: F, x0: Vec<f64>, shape: Vec<usize>, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let h = 1e-6;
        let t0 = Tensor::new(shape.clone(), x0.clone()).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(t0, true);
        let loss = build(&mut g, x);
        g.backward(loss, 1.0).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        for i in 0..x0.len() {
            let eval = |delta: f64| -> f64 {
                let mut xs = x0.clone();
                xs[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(Tensor::new(shape.clone(), xs).unwrap(), true);
                let loss = build(&mut g, x);
                g.value(loss).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(rel < tol, "component {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }

    fn vals(n: usize) -> Vec<f64> {
        (0..n).map(|i| libm::sin(1.3 * i as f64 + 0.31) * 0.9).collect()
    }

    #[test]
    fn grad_matmul_chain() {
        let w = Tensor::matrix(3, 2, vals(6)).unwrap();
        check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv).unwrap();
                let t = Tensor::zeros(vec![2, 2]);
                g.half_sq_sum(y, t).unwrap()
            },
            vals(6),
            vec![2, 3],
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_nt_both_sides() {
        // Gradient w.r.t. the transposed operand.
        let a = Tensor::matrix(2, 3, vals(6)).unwrap();
        check(
            move |g, x| {
                let av = g.constant(a.clone());
                let y = g.matmul_nt(av, x).unwrap();
                let t = Tensor::full(vec![2, 2], 0.3);
                g.half_sq_sum(y, t).unwrap()
            },
            vals(6),
            vec![2, 3],
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_ce() {
        check(
            |g, x| g.ce_sum_rows(x, &[2, 0]).unwrap(),
            vals(8),
            vec![2, 4],
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        // x path.
        let gamma = Tensor::new(vec![4], vec![1.1, 0.9, 1.0, 1.3]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.05]).unwrap();
        let (gm, bt) = (gamma.clone(), beta.clone());
        check(
            move |g, x| {
                let gv = g.constant(gm.clone());
                let bv = g.constant(bt.clone());
                let y = g.layer_norm(x, gv, bv, 1e-5).unwrap();
                let t = Tensor::full(vec![2, 4], 0.1);
                g.half_sq_sum(y, t).unwrap()
            },
            vals(8),
            vec![2, 4],
            1e-4,
        );
        // gamma path.
        let x0 = Tensor::matrix(2, 4, vals(8)).unwrap();
        let (xc, bc) = (x0.clone(), beta.clone());
        check(
            move |g, gvar| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc.clone());
                let y = g.layer_norm(xv, gvar, bv, 1e-5).unwrap();
                let t = Tensor::full(vec![2, 4], 0.1);
                g.half_sq_sum(y, t).unwrap()
            },
            gamma.data().to_vec(),
            vec![4],
            1e-5,
        );
    }

    #[test]
    fn grad_gelu() {
        check(
            |g, x| {
                let y = g.gelu(x);
                let t = Tensor::full(vec![1, 5], 0.2);
                g.half_sq_sum(y, t).unwrap()
            },
            alloc::vec![-2.0, -0.5, 0.0, 0.7, 2.5],
            vec![1, 5],
            1e-5,
        );
    }

    #[test]
    fn gelu_reference_values() {
        // Frozen against the tanh-form definition evaluated in extended
        // precision: gelu(1) = 0.8411919906082768.
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-15);
        assert!((gelu_scalar(0.0)).abs() < 1e-300);
        assert!((gelu_scalar(-1.0) - (-0.158_808_009_391_723_2)).abs() < 1e-15);
    }

    #[test]
    fn softmax_reference_values() {
        // softmax([1,2,3]) frozen from extended-precision evaluation.
        let mut out = vec![0.0; 3];
        softmax_rows(&[1.0, 2.0, 3.0], 1, 3, &mut out);
        let want = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_9,
            0.665_240_955_774_821_6,
        ];
        for (o, w) in out.iter().zip(want.iter()) {
            assert!((o - w).abs() < 1e-15, "{o} vs {w}");
        }
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut out = vec![0.0; 2];
        softmax_rows(&[0.0, 0.0], 1, 2, &mut out);
        assert_eq!(out, vec![0.5, 0.5]);
        softmax_rows(&[1000.0, 0.0], 1, 2, &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 0.999_999 && out[1] < 1e-6);
        let mut wide = vec![0.0; 6];
        softmax_rows(&vals(6), 2, 3, &mut wide);
        for r in 0..2 {
            let s: f64 = wide[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(wide[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn frame_stack_ceils_and_zero_pads() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..10).map(|i| i as f64 + 1.0).collect();
        let x = g.leaf(Tensor::matrix(5, 2, vals).unwrap(), true);
        let y = g.frame_stack(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 4]);
        assert_eq!(g.value(y).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(y).row(2), &[9.0, 10.0, 0.0, 0.0]);
        let loss = g.half_sq_sum(y, Tensor::zeros(vec![3, 4])).unwrap();
        g.backward(loss, 1.0).unwrap();
        // d(0.5 x^2)/dx = x for every real row entry.
        let grad = g.grad(x).unwrap();
        assert_eq!(grad, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn grad_gather_mask_stack_pipeline() {
        // Composite of structural ops: gather -> frame stack -> mask rows.
        let fill = Tensor::new(vec![2], vec![0.4, -0.3]).unwrap();
        check(
            move |g, table| {
                let gathered = g.gather_rows(table, &[0, 2, 1, 2]).unwrap();
                let stacked = g.frame_stack(gathered, 2).unwrap(); // [2, 2]
                let fv = g.constant(fill.clone());
                let masked = g.mask_rows(stacked, fv, &[true, false]).unwrap();
                let t = Tensor::full(vec![2, 2], 0.25);
                g.half_sq_sum(masked, t).unwrap()
            },
            vals(3),
            vec![3, 1],
            1e-5,
        );
    }

    #[test]
    fn grad_mask_fill_vector() {
        let x0 = Tensor::matrix(3, 2, vals(6)).unwrap();
        check(
            move |g, fill| {
                let xv = g.constant(x0.clone());
                let masked = g.mask_rows(xv, fill, &[true, false, true]).unwrap();
                let t = Tensor::full(vec![3, 2], -0.1);
                g.half_sq_sum(masked, t).unwrap()
            },
            alloc::vec![0.3, -0.8],
            vec![2],
            1e-5,
        );
    }

    #[test]
    fn grad_slice_concat_roundtrip() {
        check(
            |g, x| {
                let a = g.slice_cols(x, 0, 2).unwrap();
                let b = g.slice_cols(x, 2, 2).unwrap();
                let sa = g.scale(a, 2.0);
                let y = g.concat_cols(&[sa, b]).unwrap();
                let t = Tensor::full(vec![2, 4], 0.15);
                g.half_sq_sum(y, t).unwrap()
            },
            vals(8),
            vec![2, 4],
            1e-5,
        );
    }

    #[test]
    fn grad_bias_and_dropout_mask() {
        let mask = Tensor::matrix(2, 3, vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0]).unwrap();
        check(
            move |g, b| {
                let x = g.constant(Tensor::matrix(2, 3, vals(6)).unwrap());
                let y = g.add_bias(x, b).unwrap();
                let z = g.elem_mul(y, mask.clone()).unwrap();
                let t = Tensor::zeros(vec![2, 3]);
                g.half_sq_sum(z, t).unwrap()
            },
            alloc::vec![0.2, -0.4, 0.6],
            vec![3],
            1e-5,
        );
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = 0.5*sum((x + x)^2) => dloss/dx = 4x.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.5, -0.7]).unwrap(), true);
        let y = g.add(x, x).unwrap();
        let loss = g.half_sq_sum(y, Tensor::zeros(vec![2])).unwrap();
        g.backward(loss, 1.0).unwrap();
        let grad = g.grad(x).unwrap();
        assert!((grad[0] - 6.0).abs() < 1e-12);
        assert!((grad[1] + 2.8).abs() < 1e-12);
    }

    #[test]
    fn backward_seed_scales_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let loss = g.half_sq_sum(x, Tensor::zeros(vec![2])).unwrap();
        g.backward(loss, 0.5).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad, &[0.5, 1.0]);
    }

    #[test]
    fn no_grad_leaves_are_skipped() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let y = g.scale(x, 3.0);
        assert!(!g.nodes[y.0].requires_grad);
        let loss = g.half_sq_sum(y, Tensor::zeros(vec![2])).unwrap();
        g.backward(loss, 1.0).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(g.backward(x, 1.0).is_err());
    }

    #[test]
    fn gather_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::matrix(3, 2, vals(6)).unwrap(), true);
        assert!(g.gather_rows(t, &[0, 3]).is_err());
    }
}
