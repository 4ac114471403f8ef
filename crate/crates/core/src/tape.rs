//! Reverse-mode differentiation over a linear tape.
//!
//! Each call on [`Tape`] evaluates one operation eagerly, appends a node
//! holding the output value, and returns a [`Var`] handle to it. Nodes only
//! ever reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SoftmaxRows {
        input: Var,
        scale: f64,
    },
    VnLeaky {
        q: Var,
        d: Var,
        alpha: f64,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        input: Var,
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-node gradients returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

struct MatMulDims {
    batch_shape: Vec<usize>,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    p: usize,
    q: usize,
    r: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(Error::shape("matmul", a, b));
    }
    let batch_shape = match (ab.is_empty(), bb.is_empty()) {
        (true, true) => vec![],
        (false, true) => ab.to_vec(),
        (true, false) => bb.to_vec(),
        (false, false) if ab == bb => ab.to_vec(),
        _ => return Err(Error::shape("matmul", a, b)),
    };
    Ok(MatMulDims {
        batch: batch_shape.iter().product(),
        batch_shape,
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        p: am[0],
        q: am[1],
        r: bm[1],
    })
}

/// (outer, axis, inner) extents for reductions/concats along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or be absent on one side (broadcast).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let d = matmul_dims(at.shape(), bt.shape())?;
        let (p, q, r) = (d.p, d.q, d.r);
        let mut out = vec![0.0; d.batch * p * r];
        for bi in 0..d.batch {
            let ao = if d.a_batched { bi * p * q } else { 0 };
            let bo = if d.b_batched { bi * q * r } else { 0 };
            gemm_acc(
                &at.data()[ao..ao + p * q],
                &bt.data()[bo..bo + q * r],
                &mut out[bi * p * r..(bi + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let mut shape = d.batch_shape;
        shape.extend([p, r]);
        self.push("matmul", Tensor::from_op(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.numel() / (rows * cols);
        let src = t.data();
        let mut out = vec![0.0; t.numel()];
        for bi in 0..batch {
            let o = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = src[o + i * cols + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        self.push("transpose", Tensor::from_op(shape, out), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("add", at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_op(at.shape().to_vec(), data);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor::from_op(shape, out), op, inputs)
    }

    /// Row-wise `softmax(s / scale)` over the last axis of a rank-2 tensor,
    /// stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, s: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("softmax scale must be positive, got {scale}")));
        }
        let t = self.value(s);
        if t.rank() != 2 {
            return Err(Error::shape("softmax_rows", t.shape(), &[]));
        }
        let out = softmax_rows_raw(t.data(), t.shape()[1], scale);
        let t = Tensor::from_op(t.shape().to_vec(), out);
        self.push("softmax_rows", t, Op::SoftmaxRows { input: s, scale }, &[s])
    }

    /// Vector-neuron leaky ReLU. For each vector `q` (last axis) with
    /// direction `d`: keep `q` when `⟨q,d⟩ ≥ 0`, otherwise remove the
    /// fraction `1 − alpha` of its component along `d`. A vanishing `d`
    /// (‖d‖ < 1e-12) passes `q` through.
    pub fn vn_leaky(&mut self, q: Var, d: Var, alpha: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Contract(format!(
                "leak coefficient must lie in [0,1), got {alpha}"
            )));
        }
        let (qt, dt) = (self.value(q), self.value(d));
        if qt.shape() != dt.shape() {
            return Err(Error::shape("vn_leaky", qt.shape(), dt.shape()));
        }
        let dim = *qt.shape().last().unwrap();
        let mut out = qt.data().to_vec();
        for (o, dv) in out.chunks_exact_mut(dim).zip(dt.data().chunks_exact(dim)) {
            let nn: f64 = dv.iter().map(|x| x * x).sum();
            if nn.sqrt() < 1e-12 {
                continue;
            }
            let s: f64 = o.iter().zip(dv).map(|(a, b)| a * b).sum();
            if s >= 0.0 {
                continue;
            }
            let f = (1.0 - alpha) * s / nn;
            for (ov, &dd) in o.iter_mut().zip(dv) {
                *ov -= f * dd;
            }
        }
        let t = Tensor::from_op(qt.shape().to_vec(), out);
        self.push("vn_leaky", t, Op::VnLeaky { q, d, alpha }, &[q, d])
    }

    /// Arithmetic mean over `axis`, which is removed from the shape (a rank-1
    /// input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape("mean_axis", t.shape(), &[axis]));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= n as f64;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::from_op(shape, out);
        self.push("mean_axis", t, Op::MeanAxis { input: a, axis }, &[a])
    }

    /// Dense layer `x·wᵀ + b` for `x: M×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.rank() != 2 || wt.rank() != 2 || xt.shape()[1] != wt.shape()[1] {
            return Err(Error::shape("linear", xt.shape(), wt.shape()));
        }
        let (m, inp, outp) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
        let mut out = vec![0.0; m * outp];
        gemm_nt_acc(xt.data(), wt.data(), &mut out, m, outp, inp);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.numel() != outp {
                return Err(Error::shape("linear bias", wt.shape(), bt.shape()));
            }
            for row in out.chunks_exact_mut(outp) {
                for (o, bv) in row.iter_mut().zip(bt.data()) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::from_op(vec![m, outp], out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    /// Scalar leaky ReLU; `slope = 0` gives the plain ReLU.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let t = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push("leaky_relu", t, Op::LeakyRelu { input: a, slope }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::shape("mask", t.shape(), &[mask.len()]));
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_op(t.shape().to_vec(), data);
        self.push("mask", t, Op::Mask { input: a, mask }, &[a])
    }

    /// Batch normalization over the rows of `x: M×F`. In training mode the
    /// row statistics are used and returned; otherwise `running` supplies
    /// the mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::shape("batch_norm", xt.shape(), &[]));
        }
        let (m, f) = (xt.shape()[0], xt.shape()[1]);
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.numel() != f || bt.numel() != f {
            return Err(Error::shape("batch_norm", xt.shape(), gt.shape()));
        }
        let training = running.is_none();
        let (mean, var) = match running {
            Some((mu, var)) => {
                if mu.len() != f || var.len() != f {
                    return Err(Error::shape("batch_norm running stats", xt.shape(), &[mu.len()]));
                }
                (mu.to_vec(), var.to_vec())
            }
            None => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for row in xt.data().chunks_exact(f) {
                    for (mu, v) in mean.iter_mut().zip(row) {
                        *mu += v / m as f64;
                    }
                }
                for row in xt.data().chunks_exact(f) {
                    for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - mu) * (v - mu) / m as f64;
                    }
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * f];
        let mut out = vec![0.0; m * f];
        for (i, row) in xt.data().chunks_exact(f).enumerate() {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = gt.data()[j] * h + bt.data()[j];
            }
        }
        let t = Tensor::from_op(vec![m, f], out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        };
        let v = self.push("batch_norm", t, op, &[x, gamma, beta])?;
        Ok((v, training.then_some(BatchStats { mean, var })))
    }

    /// Mean cross-entropy of `logits: M×K` against `labels` (length M).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows_raw(t.data(), k, 1.0);
        let m = labels.len() as f64;
        let mut loss = 0.0;
        for (row, &l) in t.data().chunks_exact(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += (lse - row[l]) / m;
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let op = Op::WeightedSum {
            input: a,
            weights: None,
        };
        self.push("sum", Tensor::scalar(s), op, &[a])
    }

    /// `Σ wᵢ aᵢ` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", t.shape(), weights.shape()));
        }
        let s = t.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let op = Op::WeightedSum {
            input: a,
            weights: Some(weights.data().to_vec()),
        };
        self.push("weighted_sum", Tensor::scalar(s), op, &[a])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_op(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if self.wants(v) {
            add_into(&mut grads[v.0], delta);
        }
    }

    fn propagate(&self, node: &Node, gd: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let gshape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let d = matmul_dims(at.shape(), bt.shape()).expect("validated in forward");
                let (p, q, r) = (d.p, d.q, d.r);
                if self.wants(*a) {
                    let mut da = vec![0.0; at.numel()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * p * q } else { 0 };
                        let bo = if d.b_batched { bi * q * r } else { 0 };
                        gemm_nt_acc(
                            &gd[bi * p * r..(bi + 1) * p * r],
                            &bt.data()[bo..bo + q * r],
                            &mut da[ao..ao + p * q],
                            p,
                            q,
                            r,
                        );
                    }
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bt.numel()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * p * q } else { 0 };
                        let bo = if d.b_batched { bi * q * r } else { 0 };
                        gemm_tn_acc(
                            &at.data()[ao..ao + p * q],
                            &gd[bi * p * r..(bi + 1) * p * r],
                            &mut db[bo..bo + q * r],
                            p,
                            q,
                            r,
                        );
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = gshape;
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = gd.len() / (rows * cols);
                let mut out = vec![0.0; gd.len()];
                for bi in 0..batch {
                    let o = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            out[o + j * rows + i] = gd[o + i * cols + j];
                        }
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::Reshape(a) => self.acc(grads, *a, gd.to_vec()),
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Scale(a, c) => self.acc(grads, *a, gd.iter().map(|x| x * c).collect()),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(gshape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.acc(grads, v, part);
                    }
                    offset += len;
                }
            }
            Op::SoftmaxRows { input, scale } => {
                let w = node.value.data();
                let cols = node.value.shape()[1];
                let mut ds = vec![0.0; w.len()];
                for ((drow, wrow), grow) in ds
                    .chunks_exact_mut(cols)
                    .zip(w.chunks_exact(cols))
                    .zip(gd.chunks_exact(cols))
                {
                    let dot: f64 = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((d, &wv), &gv) in drow.iter_mut().zip(wrow).zip(grow) {
                        *d = wv * (gv - dot) / scale;
                    }
                }
                self.acc(grads, *input, ds);
            }
            Op::VnLeaky { q, d, alpha } => {
                let (qt, dt) = (self.value(*q), self.value(*d));
                let dim = *qt.shape().last().unwrap();
                let beta = 1.0 - alpha;
                let mut dq = gd.to_vec();
                let mut dd = vec![0.0; dt.numel()];
                for (((dqv, ddv), qv), (dv, gv)) in dq
                    .chunks_exact_mut(dim)
                    .zip(dd.chunks_exact_mut(dim))
                    .zip(qt.data().chunks_exact(dim))
                    .zip(dt.data().chunks_exact(dim).zip(gd.chunks_exact(dim)))
                {
                    let nn: f64 = dv.iter().map(|x| x * x).sum();
                    if nn.sqrt() < 1e-12 {
                        continue;
                    }
                    let s: f64 = qv.iter().zip(dv).map(|(a, b)| a * b).sum();
                    if s >= 0.0 {
                        continue;
                    }
                    // out = q − β s/n · d with s = ⟨q,d⟩, n = ‖d‖².
                    let gdot: f64 = gv.iter().zip(dv).map(|(a, b)| a * b).sum();
                    for k in 0..dim {
                        dqv[k] -= beta * gdot / nn * dv[k];
                        ddv[k] = -beta * (qv[k] * gdot / nn + s * gv[k] / nn - 2.0 * s * gdot * dv[k] / (nn * nn));
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *d, dd);
            }
            Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut out[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s / n as f64;
                        }
                    }
                }
                self.acc(grads, *input, out);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (m, inp, outp) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * inp];
                    gemm_acc(gd, wt.data(), &mut dx, m, outp, inp);
                    self.acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; outp * inp];
                    gemm_tn_acc(gd, xt.data(), &mut dw, m, outp, inp);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; outp];
                    for row in gd.chunks_exact(outp) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv >= 0.0 { gv } else { slope * gv })
                    .collect();
                self.acc(grads, *input, dx);
            }
            Op::Mask { input, mask } => {
                self.acc(grads, *input, gd.iter().zip(mask).map(|(a, b)| a * b).collect());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let f = inv_std.len();
                let m = gd.len() / f;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (grow, hrow) in gd.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                    for j in 0..f {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * f];
                    for i in 0..m {
                        for j in 0..f {
                            let dh = gd[i * f + j] * gam[j];
                            dx[i * f + j] = if *training {
                                inv_std[j] / m as f64
                                    * (m as f64 * dh - dbeta[j] * gam[j] - xhat[i * f + j] * dgamma[j] * gam[j])
                            } else {
                                dh * inv_std[j]
                            };
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = gd[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &l) in dl.chunks_exact_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::WeightedSum { input, weights } => {
                let n = self.value(*input).numel();
                let dx = match weights {
                    Some(w) => w.iter().map(|x| x * gd[0]).collect(),
                    None => vec![gd[0]; n],
                };
                self.acc(grads, *input, dx);
            }
        }
    }
}

pub(crate) fn softmax_rows_raw(data: &[f64], cols: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (orow, row) in out.chunks_exact_mut(cols).zip(data.chunks_exact(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = ((x - max) / scale).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}
