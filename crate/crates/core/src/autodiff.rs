//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever it needs for
//! the backward rule. Inputs always precede the node that consumes them, so a
//! single reverse sweep over the tape visits nodes in reverse topological order.
//! Gradients reaching a node from several consumers are summed.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{matmul_acc, softmax_in_place, transpose_raw, Tensor};

/// Guard on `‖v‖` in the backward of [`Tape::norm`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Statistics a batch-norm node normalizes with.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Mean and biased variance of the current batch.
    Batch,
    /// Externally supplied running statistics.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddN(Vec<Var>),
    Relu(Var),
    Square(Var),
    SqrtFloor(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    Div(Var, Var),
    Concat(Vec<Var>),
    Index(Var, usize),
    Stack(Vec<Var>),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    AddBias(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    PairwiseDistance { x: Var, floor: f64 },
    Gather { x: Var, indices: Vec<usize> },
    Opaque { name: String, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddN(..) => "add_n",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::SqrtFloor(..) => "sqrt_floor",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Norm(..) => "norm",
            Op::Div(..) => "div",
            Op::Concat(..) => "concat",
            Op::Index(..) => "index",
            Op::Stack(..) => "stack",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::AddBias(..) => "add_bias",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PairwiseDistance { .. } => "pairwise_distance",
            Op::Gather { .. } => "gather",
            Op::Opaque { .. } => "opaque",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Div(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::SqrtFloor(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::Index(a, _)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::AddN(v) | Op::Concat(v) | Op::Stack(v) => v.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaxPool2 { x, .. } | Op::PairwiseDistance { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Opaque { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Missing entries are zero.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(op, value, rg)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).sub(self.val(b))?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).mul(self.val(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).scale(s);
        self.push(Op::Scale(a, s), out)
    }

    /// `a · s` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.val(s).item()?;
        let out = self.val(a).scale(sv);
        Ok(self.push(Op::MulScalar(a, s), out))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => v,
            None => return dim_err("add_n", "no inputs"),
        };
        let mut acc = self.val(first).clone();
        for &p in &parts[1..] {
            acc = acc.add(self.val(p))?;
        }
        Ok(self.push(Op::AddN(parts.to_vec()), acc))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).relu();
        self.push(Op::Relu(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|v| v * v);
        self.push(Op::Square(a), out)
    }

    /// `sqrt(max(a, floor))` elementwise.
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Var {
        let out = self.val(a).map(|v| v.max(floor).sqrt());
        self.push(Op::SqrtFloor(a, floor), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Euclidean norm of all entries.
    pub fn norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).frobenius_norm());
        self.push(Op::Norm(a), out)
    }

    /// Quotient of two one-element nodes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a).item()?, self.val(b).item()?);
        let q = x / y;
        if !q.is_finite() {
            return Err(Error::NonFinite(format!("div {x} / {y}")));
        }
        Ok(self.push(Op::Div(a, b), Tensor::scalar(q)))
    }

    /// Concatenation along axis 1 (channels for `[B, C, ...]`, features for `[B, D]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => self.val(v).shape().to_vec(),
            None => return dim_err("concat", "no inputs"),
        };
        if first.len() < 2 {
            return dim_err("concat", "inputs must have rank >= 2");
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return dim_err("concat", format!("{s:?} vs {first:?}"));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for &p in parts {
                let t = self.val(p);
                let chunk = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(shape, data)))
    }

    /// Slice `index` along axis 0.
    pub fn index(&mut self, a: Var, index: usize) -> Result<Var> {
        let out = self.val(a).index_axis0(index)?;
        Ok(self.push(Op::Index(a, index), out))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.val(p).clone()).collect();
        let out = Tensor::stack(&values)?;
        Ok(self.push(Op::Stack(parts.to_vec()), out))
    }

    /// Stride-1 convolution of `x: [B, Ci, H, W]` with `w: [Co, Ci, k, k]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
        let (&[batch, c_in, h, wd], &[c_out, wc, k, k2]) = (xs, ws) else {
            return dim_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        };
        if wc != c_in || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return dim_err("conv2d", format!("input {xs:?}, weight {ws:?}, pad {pad}"));
        }
        let geom = ConvGeom { batch, c_in, c_out, h, w: wd, k, pad, h_out: h + 2 * pad + 1 - k, w_out: wd + 2 * pad + 1 - k };
        let out = kernels::conv2d_forward(self.val(x).data(), self.val(w).data(), &geom);
        let value = Tensor::from_parts(vec![batch, c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(Op::Conv2d { x, w, geom }, value))
    }

    /// Batch normalization over every axis except axis 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &NormStats, eps: f64) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() < 2 {
            return dim_err("batch_norm", format!("input {xs:?}"));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.val(gamma).shape() != [ch] || self.val(beta).shape() != [ch] {
            return dim_err("batch_norm", format!("scale/shift must have shape [{ch}]"));
        }
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let s = kernels::channel_stats(self.val(x).data(), batch, ch, inner);
                (s.mean, s.var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return dim_err("batch_norm", "running statistics length");
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.val(gamma).data(), self.val(beta).data());
        let xd = self.val(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, value))
    }

    /// 2×2 max pooling, stride 2, on `[B, C, H, W]` with even `H`, `W`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape();
        let &[b, c, h, w] = s else {
            return dim_err("max_pool2", format!("input {s:?}"));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err("max_pool2", format!("odd spatial size {h}x{w}"));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.val(x).data(), b * c, h, w);
        let value = Tensor::from_parts(vec![b, c, h / 2, w / 2], out);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape();
        let &[b, c, h, w] = s else {
            return dim_err("global_avg_pool", format!("input {s:?}"));
        };
        let n = (h * w) as f64;
        let data = self.val(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        Ok(self.push(Op::GlobalAvgPool(x), Tensor::from_parts(vec![b, c], data)))
    }

    /// Adds `bias: [C]` along axis 1 of `x: [B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() < 2 || self.val(bias).shape() != [xs[1]] {
            return dim_err("add_bias", format!("{xs:?} + {:?}", self.val(bias).shape()));
        }
        let inner: usize = xs[2..].iter().product();
        let ch = xs[1];
        let bd = self.val(bias).data();
        let mut data = self.val(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bd[(i / inner) % ch];
        }
        Ok(self.push(Op::AddBias(x, bias), Tensor::from_parts(xs, data)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.val(logits).shape2()?;
        if labels.len() != s.rows {
            return dim_err("cross_entropy", format!("{} labels for {} rows", labels.len(), s.rows));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.cols) {
            return Err(Error::Contract(format!("label {bad} out of range for {} classes", s.cols)));
        }
        let mut probs = self.val(logits).data().to_vec();
        let mut total = 0.0;
        for (r, row) in self.val(logits).data().chunks(s.cols).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
            softmax_in_place(&mut probs[r * s.cols..(r + 1) * s.cols]);
        }
        let value = Tensor::scalar(total / s.rows as f64);
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, value))
    }

    /// Euclidean distances between the rows of `x: [B, D]`, `sqrt(max(d², floor))`.
    pub fn pairwise_distance(&mut self, x: Var, floor: f64) -> Result<Var> {
        let s = self.val(x).shape2()?;
        let xd = self.val(x).data();
        let mut out = vec![0.0; s.rows * s.rows];
        for i in 0..s.rows {
            for j in 0..s.rows {
                let sq: f64 = (0..s.cols).map(|k| (xd[i * s.cols + k] - xd[j * s.cols + k]).powi(2)).sum();
                out[i * s.rows + j] = sq.max(floor).sqrt();
            }
        }
        Ok(self.push(Op::PairwiseDistance { x, floor }, Tensor::from_parts(vec![s.rows, s.rows], out)))
    }

    /// Picks entries of `x` by flat index into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.val(x).numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return dim_err("gather", format!("indices out of range for {n} entries"));
        }
        let data = indices.iter().map(|&i| self.val(x).data()[i]).collect();
        Ok(self.push(Op::Gather { x, indices: indices.to_vec() }, Tensor::from_parts(vec![indices.len()], data)))
    }

    /// Records a value computed outside the tape from `inputs`. It has no backward rule:
    /// a gradient reaching it is reported as [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor) -> Var {
        self.push(Op::Opaque { name: name.to_string(), inputs: inputs.to_vec() }, value)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(GradientMap { grads });
        }
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = Accumulator { grads: &mut grads, nodes: &self.nodes, non_finite: false };
            self.backward_node(node, &g, &mut acc)?;
            if acc.non_finite {
                return Err(Error::NonFinite(format!("gradient through {}", node.op.name())));
            }
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, acc: &mut Accumulator<'_>) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add(*a, gd.to_vec());
                acc.add(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc.add(*a, gd.to_vec());
                acc.add(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if acc.wants(*a) {
                    acc.add(*a, zip(gd, self.val(*b).data(), |g, y| g * y));
                }
                if acc.wants(*b) {
                    acc.add(*b, zip(gd, self.val(*a).data(), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc.add(*a, gd.iter().map(|v| v * s).collect()),
            Op::MulScalar(a, s) => {
                let sv = self.val(*s).data()[0];
                if acc.wants(*a) {
                    acc.add(*a, gd.iter().map(|v| v * sv).collect());
                }
                if acc.wants(*s) {
                    let d: f64 = gd.iter().zip(self.val(*a).data()).map(|(g, x)| g * x).sum();
                    acc.add(*s, vec![d]);
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc.add(p, gd.to_vec());
                }
            }
            Op::Relu(a) => acc.add(*a, zip(gd, self.val(*a).data(), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Square(a) => acc.add(*a, zip(gd, self.val(*a).data(), |g, x| 2.0 * g * x)),
            Op::SqrtFloor(a, floor) => {
                let grad = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .zip(node.value.data())
                    .map(|((g, &x), &y)| if x > *floor { 0.5 * g / y } else { 0.0 })
                    .collect();
                acc.add(*a, grad);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if acc.wants(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_acc(gd, &bt, &mut ga, m, n, k);
                    acc.add(*a, ga);
                }
                if acc.wants(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_acc(&at, gd, &mut gb, k, m, n);
                    acc.add(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                acc.add(*a, transpose_raw(gd, s[0], s[1]));
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in gd.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                acc.add(*a, ga);
            }
            Op::Reshape(a) => acc.add(*a, gd.to_vec()),
            Op::Sum(a) => acc.add(*a, vec![gd[0]; self.val(*a).numel()]),
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                acc.add(*a, vec![gd[0] / n as f64; n]);
            }
            Op::Norm(a) => {
                let denom = node.value.data()[0].max(NORM_EPS);
                acc.add(*a, self.val(*a).data().iter().map(|x| gd[0] * x / denom).collect());
            }
            Op::Div(a, b) => {
                let (x, y) = (self.val(*a).data()[0], self.val(*b).data()[0]);
                acc.add(*a, vec![gd[0] / y]);
                acc.add(*b, vec![-gd[0] * x / (y * y)]);
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (batch, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).shape()[1];
                    if acc.wants(p) {
                        let mut gp = Vec::with_capacity(batch * c * inner);
                        for b in 0..batch {
                            let start = (b * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + c * inner]);
                        }
                        acc.add(p, gp);
                    }
                    offset += c;
                }
            }
            Op::Index(a, i) => {
                let n = gd.len();
                let mut ga = vec![0.0; self.val(*a).numel()];
                ga[i * n..(i + 1) * n].copy_from_slice(gd);
                acc.add(*a, ga);
            }
            Op::Stack(parts) => {
                let n = gd.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    acc.add(p, gd[i * n..(i + 1) * n].to_vec());
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (want_x, want_w) = (acc.wants(*x), acc.wants(*w));
                let (dx, dw) = kernels::conv2d_backward(
                    self.val(*x).data(),
                    self.val(*w).data(),
                    gd,
                    geom,
                    want_x,
                    want_w,
                );
                if let Some(dx) = dx {
                    acc.add(*x, dx);
                }
                if let Some(dw) = dw {
                    acc.add(*w, dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = node.value.shape();
                let (batch, ch) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (batch * inner) as f64;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * inner;
                        for i in off..off + inner {
                            sum_g[c] += gd[i];
                            sum_gx[c] += gd[i] * xhat[i];
                        }
                    }
                }
                if acc.wants(*x) {
                    let gamma_v = self.val(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * inner;
                            let k = gamma_v[c] * inv_std[c];
                            for i in off..off + inner {
                                dx[i] = if *batch_stats {
                                    k * (gd[i] - sum_g[c] / m - xhat[i] * sum_gx[c] / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    acc.add(*x, dx);
                }
                acc.add(*gamma, sum_gx);
                acc.add(*beta, sum_g);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                acc.add(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.val(*x).shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(hw * gd.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc.add(*x, dx);
            }
            Op::AddBias(x, bias) => {
                let s = node.value.shape();
                let ch = s[1];
                let inner: usize = s[2..].iter().product();
                if acc.wants(*bias) {
                    let mut gb = vec![0.0; ch];
                    for (i, gv) in gd.iter().enumerate() {
                        gb[(i / inner) % ch] += gv;
                    }
                    acc.add(*bias, gb);
                }
                acc.add(*x, gd.to_vec());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let cols = probs.len() / rows;
                let scale = gd[0] / rows as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * cols + l] -= scale;
                }
                acc.add(*logits, gl);
            }
            Op::PairwiseDistance { x, floor } => {
                let xv = self.val(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let xd = xv.data();
                let d = node.value.data();
                let mut gx = vec![0.0; xd.len()];
                for i in 0..rows {
                    for j in 0..rows {
                        let dij = d[i * rows + j];
                        let gij = gd[i * rows + j];
                        if gij == 0.0 || dij * dij <= *floor {
                            continue;
                        }
                        let coef = gij / dij;
                        for k in 0..cols {
                            let diff = xd[i * cols + k] - xd[j * cols + k];
                            gx[i * cols + k] += coef * diff;
                            gx[j * cols + k] -= coef * diff;
                        }
                    }
                }
                acc.add(*x, gx);
            }
            Op::Gather { x, indices } => {
                let mut gx = vec![0.0; self.val(*x).numel()];
                for (&i, &gv) in indices.iter().zip(gd) {
                    gx[i] += gv;
                }
                acc.add(*x, gx);
            }
            Op::Opaque { name, inputs } => {
                if inputs.iter().any(|&v| acc.wants(v)) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    grads: &'a mut [Option<Tensor>],
    nodes: &'a [Node],
    non_finite: bool,
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, grad: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            self.non_finite = true;
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, grad));
            }
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
