//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse scan.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_a_bt, matmul_at_b, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Mask(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_values(x: &Tensor) -> Vec<f64> {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = &x.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a 2-D tensor, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Recording tape for one forward/backward evaluation.
#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    /// Adds a `1 × n` (or length-`n`) bias to every row of an `m × n` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = require_2d("add_row", self.value(a))?;
        if self.value(bias).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        require_2d("softmax_rows", x)?;
        let value = Tensor::new(x.shape().to_vec(), softmax_rows_values(x))?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = require_2d("layer_norm", self.value(x))?;
        if n < 2 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                msg: "rows need at least two entries".into(),
            });
        }
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * istd;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
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

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_2d("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_2d("slice_cols", self.value(a))?;
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for width {n}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_2d("slice_rows", self.value(a))?;
        if len == 0 || start + len > m {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for height {m}", start + len),
            });
        }
        let src = &self.value(a).data()[start * n..(start + len) * n];
        let value = Tensor::new(vec![len, n], src.to_vec())?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = require_2d("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = require_2d("concat_cols", self.value(p))?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, n) = require_2d("concat_rows", self.value(first))?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = require_2d("concat_rows", self.value(p))?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `out.data[i] = a.data[index[i]]`, producing a tensor of `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let src = self.value(a).data();
        if index.len() != numel || index.iter().any(|&i| i >= src.len()) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!(
                    "index of length {} invalid for source of {} and target shape {shape:?}",
                    index.len(),
                    src.len()
                ),
            });
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Gather(a, index)))
    }

    /// Inverted dropout. `draw` yields uniform samples in `[0, 1)`; it is not
    /// called in [`Mode::Eval`], where the input is returned unchanged.
    pub fn dropout(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        mut draw: impl FnMut() -> f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if draw() < rate { 0.0 } else { keep_scale })
            .collect();
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(&mask)
                .map(|(x, m)| x * m)
                .collect(),
        )?;
        Ok(self.push(value, Op::Mask(a, mask)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.hadamard(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean cross-entropy of row-wise softmax over `logits[m × c]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = require_2d("softmax_cross_entropy", self.value(logits))?;
        if labels.len() != m || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for {m} rows of {c} classes", labels.len()),
            });
        }
        let probs = softmax_rows_values(self.value(logits));
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs[r * c + l].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradient of `root` with respect to every node on the tape.
    pub fn gradients(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Runs the reverse sweep from a scalar root and accumulates into `store`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.accumulate(*id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, t: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                let da = matmul_a_bt(g.data(), bv.data(), m, n, k);
                let db = matmul_at_b(av.data(), g.data(), m, k, n);
                send(*a, Tensor::new(vec![m, k], da)?);
                send(*b, Tensor::new(vec![k, n], db)?);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.zip_map(bv, |x, y| x * y));
                send(*b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                send(*a, g.clone());
                send(*bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => send(*a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Gelu(a) => send(*a, g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x))),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut dx = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(gi, y)| y * (gi - dot)));
                }
                send(*a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                let mut dx = Vec::with_capacity(out.numel());
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for (r, grow) in g.data().chunks(n).enumerate() {
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let dh = grow[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                    }
                    let scale = inv_std[r] / n as f64;
                    for j in 0..n {
                        let dh = grow[j] * gv[j];
                        dx.push(scale * (n as f64 * dh - sum_dh - hrow[j] * sum_dh_h));
                    }
                }
                send(*x, Tensor::new(out.shape().to_vec(), dx)?);
                send(*gain, Tensor::new(self.shape(*gain).to_vec(), dgain)?);
                send(*bias, Tensor::new(self.shape(*bias).to_vec(), dbias)?);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::SliceCols(a, start) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let len = g.cols();
                let mut da = vec![0.0; m * n];
                for (r, grow) in g.data().chunks(len).enumerate() {
                    da[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                send(*a, Tensor::new(vec![m, n], da)?);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut da = vec![0.0; src.numel()];
                da[start * n..start * n + g.numel()].copy_from_slice(g.data());
                send(*a, Tensor::new(src.shape().to_vec(), da)?);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut dp = Vec::with_capacity(pv.numel());
                    for grow in g.data().chunks(total) {
                        dp.extend_from_slice(&grow[offset..offset + w]);
                    }
                    offset += w;
                    send(p, Tensor::new(pv.shape().to_vec(), dp)?);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    send(
                        p,
                        Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + len].to_vec())?,
                    );
                    offset += len;
                }
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(self.shape(*a))?),
            Op::Gather(a, index) => {
                let src = self.value(*a);
                let mut da = vec![0.0; src.numel()];
                for (&i, &gi) in index.iter().zip(g.data()) {
                    da[i] += gi;
                }
                send(*a, Tensor::new(src.shape().to_vec(), da)?);
            }
            Op::Mask(a, mask) => {
                let dm = Tensor::new(g.shape().to_vec(), mask.clone())?;
                send(*a, g.zip_map(&dm, |x, m| x * m));
            }
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                send(*a, Tensor::full(self.shape(*a), g.data()[0] / n));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let lv = self.value(*logits);
                let (m, c) = (lv.rows(), lv.cols());
                let scale = g.data()[0] / m as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= scale);
                send(*logits, Tensor::new(vec![m, c], d)?);
            }
        }
        Ok(())
    }
}
