//! Tape-based reverse-mode differentiation over the handful of primitives the
//! two network families need.
//!
//! A [`Graph`] records nodes in creation order, which is also a topological
//! order: every operation can only consume nodes that already exist.
//! [`Graph::backward`] walks the tape once in reverse.

pub mod kernels;

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::Tensor;
use kernels::Window;

/// Variance floor used by batch and group normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("input error in {op}: {detail}")]
    Input { op: &'static str, detail: String },
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

fn config_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T, GraphError> {
    Err(GraphError::Config { op, detail: detail.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, win: Window },
    Relu { input: NodeId },
    MaxPool { input: NodeId, argmax: Vec<u32> },
    GlobalAvgPool { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    /// Normalization with statistics computed from the batch. `groups` is
    /// `None` for per-channel batch statistics.
    Norm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: Option<usize>,
        xhat: Vec<f32>,
        inv_std: Vec<f64>,
    },
    /// Per-channel `gamma·(x − mean)·inv_std + beta` with fixed statistics.
    FrozenNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, probs: Vec<f64>, labels: Vec<usize> },
    Sum { input: NodeId },
    Dot { input: NodeId, weights: Tensor },
    Select { input: NodeId, index: usize },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Relu { input }
            | Op::MaxPool { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Sum { input }
            | Op::Dot { input, .. }
            | Op::Select { input, .. } => vec![*input],
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Norm { input, gamma, beta, .. } | Op::FrozenNorm { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
            Op::Add { a, b } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    retain: bool,
}

/// Batch statistics observed by a batch-normalization node, for running
/// average updates. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    batch_stats: HashMap<NodeId, BatchStats>,
}

/// Gradients returned by [`Graph::backward`]: one entry per leaf that
/// requires a gradient and per node flagged with [`Graph::retain`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Statistics of a training-mode batch normalization node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats> {
        self.batch_stats.get(&id)
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf { requires_grad })
    }

    /// Keep the gradient of this node after backward.
    pub fn retain(&mut self, id: NodeId) {
        self.nodes[id.0].retain = true;
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, retain: false });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId, GraphError> {
        if !value.all_finite() {
            return Err(GraphError::NonFinite { op: name });
        }
        Ok(self.push(value, op))
    }

    fn dims4(&self, id: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize), GraphError> {
        match self.value(id).dims4() {
            Some(d) => Ok(d),
            None => config_err(op, format!("expected rank-4 input, got {:?}", self.value(id).shape())),
        }
    }

    /// Cross-correlation of `[N,Cin,H,W]` input with `[Cout,Cin,kh,kw]`
    /// kernel, with optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, GraphError> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = self.dims4(input, OP)?;
        let (cout, kcin, kh, kw) = self.dims4(kernel, OP)?;
        if kcin != cin {
            return config_err(OP, format!("input has {cin} channels, kernel expects {kcin}"));
        }
        if stride == 0 {
            return config_err(OP, "stride must be positive");
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return config_err(OP, format!("bias shape {:?}, expected [{cout}]", self.value(b).shape()));
            }
        }
        let win = Window { kh, kw, stride, padding };
        let Some((oh, ow)) = win.output_hw(h, w) else {
            return config_err(OP, format!("{kh}x{kw} kernel larger than padded {h}x{w} input"));
        };
        let plane = oh * ow;
        let rows = cin * kh * kw;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0f32; n * cout * plane];
        let mut cols = vec![0f32; rows * plane];
        for b in 0..n {
            im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], (cin, h, w), win, (oh, ow), &mut cols);
            kernels::matmul(k, &cols, (cout, rows, plane), &mut out[b * cout * plane..(b + 1) * cout * plane]);
        }
        if let Some(bid) = bias {
            let bv = self.value(bid).data();
            for b in 0..n {
                for co in 0..cout {
                    let base = (b * cout + co) * plane;
                    for v in &mut out[base..base + plane] {
                        *v = (*v as f64 + bv[co] as f64) as f32;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out).expect("conv output shape");
        self.push_checked(value, Op::Conv2d { input, kernel, bias, win }, OP)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_checked(value, Op::Relu { input }, "relu")
    }

    /// Window maxima; padded cells never win. Ties go to the first cell in
    /// row-major window order.
    pub fn maxpool(&mut self, input: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId, GraphError> {
        const OP: &str = "maxpool";
        let (n, c, h, w) = self.dims4(input, OP)?;
        if stride == 0 || kernel == 0 || padding >= kernel {
            return config_err(OP, format!("invalid window k={kernel} s={stride} p={padding}"));
        }
        let win = Window { kh: kernel, kw: kernel, stride, padding };
        let Some((oh, ow)) = win.output_hw(h, w) else {
            return config_err(OP, format!("{kernel}x{kernel} window larger than padded {h}x{w} input"));
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out).expect("maxpool output shape");
        self.push_checked(value, Op::MaxPool { input, argmax }, OP)
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        const OP: &str = "global_avg_pool";
        let (n, c, h, w) = self.dims4(input, OP)?;
        let plane = h * w;
        let x = self.value(input).data();
        let out = (0..n * c)
            .map(|p| (x[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let value = Tensor::new(vec![n, c], out).expect("gap output shape");
        self.push_checked(value, Op::GlobalAvgPool { input }, OP)
    }

    /// `[N,F] · [O,F]ᵀ + [O]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        const OP: &str = "linear";
        let Some((n, f)) = self.value(input).dims2() else {
            return config_err(OP, format!("expected [N,F] input, got {:?}", self.value(input).shape()));
        };
        let Some((o, wf)) = self.value(weight).dims2() else {
            return config_err(OP, "weight must be rank 2");
        };
        if wf != f {
            return config_err(OP, format!("input has {f} features, weight expects {wf}"));
        }
        if self.value(bias).shape() != [o] {
            return config_err(OP, format!("bias shape {:?}, expected [{o}]", self.value(bias).shape()));
        }
        let (x, wt, b) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![0f32; n * o];
        for i in 0..n {
            let xrow = &x[i * f..(i + 1) * f];
            for j in 0..o {
                out[i * o + j] = (kernels::dot(xrow, &wt[j * f..(j + 1) * f]) + b[j] as f64) as f32;
            }
        }
        let value = Tensor::new(vec![n, o], out).expect("linear output shape");
        self.push_checked(value, Op::Linear { input, weight, bias }, OP)
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: NodeId, beta: NodeId) -> Result<(), GraphError> {
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return config_err(op, format!("affine parameter shape {:?}, expected [{c}]", self.value(p).shape()));
            }
        }
        Ok(())
    }

    /// Group normalization over `groups` contiguous channel groups per sample.
    pub fn group_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId, GraphError> {
        const OP: &str = "groupnorm";
        let (n, c, h, w) = self.dims4(input, OP)?;
        if groups == 0 || c % groups != 0 {
            return config_err(OP, format!("{c} channels not divisible into {groups} groups"));
        }
        self.check_affine(OP, c, gamma, beta)?;
        let cg = c / groups;
        let chunk = cg * h * w;
        let x = self.value(input).data();
        let mut xhat = vec![0f32; x.len()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for gi in 0..n * groups {
            let s = &x[gi * chunk..(gi + 1) * chunk];
            let (mean, var) = mean_var(s.iter().copied());
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for (d, &v) in xhat[gi * chunk..(gi + 1) * chunk].iter_mut().zip(s) {
                *d = ((v as f64 - mean) * is) as f32;
            }
            inv_std.push(is);
        }
        let out = affine_channels(&xhat, (n, c, h * w), self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(vec![n, c, h, w], out).expect("groupnorm shape");
        self.push_checked(value, Op::Norm { input, gamma, beta, groups: Some(groups), xhat, inv_std }, OP)
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, GraphError> {
        const OP: &str = "batchnorm";
        let (n, c, h, w) = self.dims4(input, OP)?;
        self.check_affine(OP, c, gamma, beta)?;
        let plane = h * w;
        let m = n * plane;
        let x = self.value(input).data();
        let mut xhat = vec![0f32; x.len()];
        let mut inv_std = Vec::with_capacity(c);
        let mut stats = BatchStats { mean: Vec::with_capacity(c), var: Vec::with_capacity(c) };
        for ch in 0..c {
            let vals = (0..n).flat_map(|b| x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied());
            let (mean, var) = mean_var(vals);
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = ((x[i] as f64 - mean) * is) as f32;
                }
            }
            inv_std.push(is);
            stats.mean.push(mean);
            stats.var.push(if m > 1 { var * m as f64 / (m - 1) as f64 } else { var });
        }
        let out = affine_channels(&xhat, (n, c, plane), self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(vec![n, c, h, w], out).expect("batchnorm shape");
        let id = self.push_checked(value, Op::Norm { input, gamma, beta, groups: None, xhat, inv_std }, OP)?;
        self.batch_stats.insert(id, stats);
        Ok(id)
    }

    /// Batch normalization with stored running statistics (inference mode).
    pub fn batch_norm_frozen(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<NodeId, GraphError> {
        const OP: &str = "batchnorm";
        let (n, c, h, w) = self.dims4(input, OP)?;
        self.check_affine(OP, c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return config_err(OP, "running statistics length mismatch");
        }
        let mean: Vec<f64> = running_mean.iter().map(|&v| v as f64).collect();
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v as f64 + NORM_EPS).sqrt()).collect();
        let plane = h * w;
        let (x, g, be) = (self.value(input).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = (g[ch] as f64 * (x[i] as f64 - mean[ch]) * inv_std[ch] + be[ch] as f64) as f32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out).expect("batchnorm shape");
        self.push_checked(value, Op::FrozenNorm { input, gamma, beta, mean, inv_std }, OP)
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.value(a).shape() != self.value(b).shape() {
            return config_err(
                "residual_add",
                format!("shapes {:?} and {:?} differ", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("add shape");
        self.push_checked(value, Op::Add { a, b }, "residual_add")
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, GraphError> {
        const OP: &str = "softmax_cross_entropy";
        let Some((n, c)) = self.value(logits).dims2() else {
            return config_err(OP, "logits must be [N,C]");
        };
        if labels.len() != n {
            return Err(GraphError::Input { op: OP, detail: format!("{} labels for batch of {n}", labels.len()) });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(GraphError::Input { op: OP, detail: format!("label {bad} outside [0, {c})") });
        }
        let probs = softmax_f64(self.value(logits).data(), c);
        let mut loss = 0f64;
        for (i, &l) in labels.iter().enumerate() {
            loss -= log_softmax_at(&self.value(logits).data()[i * c..(i + 1) * c], l);
        }
        loss /= n as f64;
        self.push_checked(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
            OP,
        )
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let s = self.value(input).sum();
        self.push_checked(Tensor::scalar(s as f32), Op::Sum { input }, "sum")
    }

    /// Scalar `Σ input·weights` against a constant tensor.
    pub fn dot_const(&mut self, input: NodeId, weights: Tensor) -> Result<NodeId, GraphError> {
        if weights.shape() != self.value(input).shape() {
            return config_err("dot", "weight shape mismatch");
        }
        let s = kernels::dot(self.value(input).data(), weights.data());
        self.push_checked(Tensor::scalar(s as f32), Op::Dot { input, weights }, "dot")
    }

    /// Scalar holding the element at flat index `index`.
    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId, GraphError> {
        let Some(&v) = self.value(input).data().get(index) else {
            return Err(GraphError::Input { op: "select", detail: format!("index {index} out of bounds") });
        };
        self.push_checked(Tensor::scalar(v), Op::Select { input, index }, "select")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        if loss.0 >= self.nodes.len() {
            return Err(GraphError::State("backward called on a node that was never recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(GraphError::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let count = loss.0 + 1;
        // A node needs a gradient if something we report depends on it.
        let mut needs = vec![false; count];
        for i in 0..count {
            let node = &self.nodes[i];
            needs[i] = node.retain
                || matches!(node.op, Op::Leaf { requires_grad: true })
                || node.op.inputs().iter().any(|p| needs[p.0]);
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &needs, &mut grads);
            let keep = node.retain || matches!(node.op, Op::Leaf { requires_grad: true });
            if keep {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if let Some(g) = g {
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape");
                out.grads.insert(NodeId(i), t);
            } else if node.retain || matches!(node.op, Op::Leaf { requires_grad: true }) {
                // Unreachable from the loss: gradient is identically zero.
                out.grads.insert(NodeId(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f32], needs: &[bool], grads: &mut [Option<Vec<f32>>]) {
        let mut send = |id: NodeId, contribution: Vec<f32>| match &mut grads[id.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Relu { input } => {
                if needs[input.0] {
                    let x = self.value(*input).data();
                    send(*input, x.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect());
                }
            }
            Op::Add { a, b } => {
                if needs[a.0] {
                    send(*a, g.to_vec());
                }
                if needs[b.0] {
                    send(*b, g.to_vec());
                }
            }
            Op::Sum { input } => {
                if needs[input.0] {
                    send(*input, vec![g[0]; self.value(*input).len()]);
                }
            }
            Op::Dot { input, weights } => {
                if needs[input.0] {
                    send(*input, weights.data().iter().map(|&w| w * g[0]).collect());
                }
            }
            Op::Select { input, index } => {
                if needs[input.0] {
                    let mut d = vec![0f32; self.value(*input).len()];
                    d[*index] = g[0];
                    send(*input, d);
                }
            }
            Op::GlobalAvgPool { input } => {
                if needs[input.0] {
                    let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                    let plane = h * w;
                    let mut d = vec![0f32; n * c * plane];
                    for p in 0..n * c {
                        let v = (g[p] as f64 / plane as f64) as f32;
                        d[p * plane..(p + 1) * plane].fill(v);
                    }
                    send(*input, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs[input.0] {
                    let mut d = vec![0f32; self.value(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src as usize] += gv;
                    }
                    send(*input, d);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = self.value(*input).dims2().expect("rank 2");
                let o = self.value(*bias).len();
                if needs[input.0] {
                    let mut d = vec![0f32; n * f];
                    kernels::matmul(g, self.value(*weight).data(), (n, o, f), &mut d);
                    send(*input, d);
                }
                if needs[weight.0] {
                    let mut d = vec![0f64; o * f];
                    kernels::matmul_at_b_acc(g, self.value(*input).data(), (o, n, f), &mut d);
                    send(*weight, to_f32(d));
                }
                if needs[bias.0] {
                    let d = (0..o).map(|j| (0..n).map(|i| g[i * o + j] as f64).sum::<f64>() as f32).collect();
                    send(*bias, d);
                }
            }
            Op::Conv2d { input, kernel, bias, win } => {
                let (n, cin, h, w) = self.value(*input).dims4().expect("rank 4");
                let (cout, _, kh, kw) = self.value(*kernel).dims4().expect("rank 4");
                let (_, _, oh, ow) = node.value.dims4().expect("rank 4");
                let plane = oh * ow;
                let rows = cin * kh * kw;
                if let Some(b) = bias {
                    if needs[b.0] {
                        let mut d = vec![0f64; cout];
                        for bi in 0..n {
                            for (co, dv) in d.iter_mut().enumerate() {
                                let base = (bi * cout + co) * plane;
                                *dv += g[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                            }
                        }
                        send(*b, to_f32(d));
                    }
                }
                let need_k = needs[kernel.0];
                let need_x = needs[input.0];
                if !need_k && !need_x {
                    return;
                }
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut cols = vec![0f32; rows * plane];
                let mut dk = if need_k { vec![0f64; cout * rows] } else { Vec::new() };
                let mut dx = if need_x { vec![0f64; n * cin * h * w] } else { Vec::new() };
                let mut dcols = if need_x { vec![0f64; rows * plane] } else { Vec::new() };
                for bi in 0..n {
                    let gb = &g[bi * cout * plane..(bi + 1) * cout * plane];
                    if need_k {
                        im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], (cin, h, w), *win, (oh, ow), &mut cols);
                        kernels::matmul_a_bt_acc(gb, &cols, (cout, plane, rows), &mut dk);
                    }
                    if need_x {
                        dcols.fill(0.0);
                        kernels::matmul_at_b_acc(k, gb, (rows, cout, plane), &mut dcols);
                        kernels::col2im_add(
                            &dcols,
                            (cin, h, w),
                            *win,
                            (oh, ow),
                            &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
                        );
                    }
                }
                if need_k {
                    send(*kernel, to_f32(dk));
                }
                if need_x {
                    send(*input, to_f32(dx));
                }
            }
            Op::Norm { input, gamma, beta, groups, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let plane = h * w;
                let gam = self.value(*gamma).data();
                if needs[gamma.0] || needs[beta.0] {
                    let mut dg = vec![0f64; c];
                    let mut db = vec![0f64; c];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                dg[ch] += g[i] as f64 * xhat[i] as f64;
                                db[ch] += g[i] as f64;
                            }
                        }
                    }
                    if needs[gamma.0] {
                        send(*gamma, to_f32(dg));
                    }
                    if needs[beta.0] {
                        send(*beta, to_f32(db));
                    }
                }
                if needs[input.0] {
                    let mut dx = vec![0f32; g.len()];
                    match groups {
                        Some(groups) => {
                            let cg = c / groups;
                            let chunk = cg * plane;
                            for gi in 0..n * groups {
                                let idx: Vec<usize> = (gi * chunk..(gi + 1) * chunk).collect();
                                let first_ch = (gi % groups) * cg;
                                norm_input_grad(&idx, |i| gam[first_ch + (i - gi * chunk) / plane], g, xhat, inv_std[gi], &mut dx);
                            }
                        }
                        None => {
                            for ch in 0..c {
                                let idx: Vec<usize> = (0..n)
                                    .flat_map(|bi| (bi * c + ch) * plane..(bi * c + ch + 1) * plane)
                                    .collect();
                                norm_input_grad(&idx, |_| gam[ch], g, xhat, inv_std[ch], &mut dx);
                            }
                        }
                    }
                    send(*input, dx);
                }
            }
            Op::FrozenNorm { input, gamma, beta, mean, inv_std } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let plane = h * w;
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                if needs[gamma.0] || needs[beta.0] {
                    let mut dg = vec![0f64; c];
                    let mut db = vec![0f64; c];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                dg[ch] += g[i] as f64 * (x[i] as f64 - mean[ch]) * inv_std[ch];
                                db[ch] += g[i] as f64;
                            }
                        }
                    }
                    if needs[gamma.0] {
                        send(*gamma, to_f32(dg));
                    }
                    if needs[beta.0] {
                        send(*beta, to_f32(db));
                    }
                }
                if needs[input.0] {
                    let mut dx = vec![0f32; g.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let s = gam[ch] as f64 * inv_std[ch];
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = (g[i] as f64 * s) as f32;
                            }
                        }
                    }
                    send(*input, dx);
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if needs[logits.0] {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] as f64 / n as f64;
                    let mut d: Vec<f32> = probs.iter().map(|&p| (p * scale) as f32).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] = ((probs[i * c + l] - 1.0) * scale) as f32;
                    }
                    send(*logits, d);
                }
            }
        }
    }
}

fn im2col(x: &[f32], chw: (usize, usize, usize), win: Window, ohw: (usize, usize), cols: &mut [f32]) {
    kernels::im2col(x, chw, win, ohw, cols)
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Two-pass mean and biased variance in `f64`.
fn mean_var(values: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let (mut count, mut sum) = (0usize, 0f64);
    for v in values.clone() {
        sum += v as f64;
        count += 1;
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / count as f64;
    (mean, var)
}

fn affine_channels(xhat: &[f32], (n, c, plane): (usize, usize, usize), gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; xhat.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                out[i] = (gamma[ch] as f64 * xhat[i] as f64 + beta[ch] as f64) as f32;
            }
        }
    }
    out
}

/// `dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))` over one
/// normalization group given by `idx`.
fn norm_input_grad(
    idx: &[usize],
    gamma_of: impl Fn(usize) -> f32,
    g: &[f32],
    xhat: &[f32],
    inv_std: f64,
    dx: &mut [f32],
) {
    let m = idx.len() as f64;
    let (mut s1, mut s2) = (0f64, 0f64);
    for &i in idx {
        let dxh = g[i] as f64 * gamma_of(i) as f64;
        s1 += dxh;
        s2 += dxh * xhat[i] as f64;
    }
    for &i in idx {
        let dxh = g[i] as f64 * gamma_of(i) as f64;
        dx[i] = (inv_std / m * (m * dxh - s1 - xhat[i] as f64 * s2)) as f32;
    }
}

fn log_softmax_at(row: &[f32], index: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[index] as f64 - lse
}

fn softmax_f64(data: &[f32], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Row-wise softmax of `[N,C]` logits, max-subtracted.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (_, c) = logits.dims2().expect("softmax expects [N,C]");
    let p = softmax_f64(logits.data(), c);
    Tensor::new(logits.shape().to_vec(), to_f32(p)).expect("softmax shape")
}

#[cfg(test)]
mod tests;
