//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! their consumers); `backward` walks the tape once in reverse and
//! accumulates gradients into every node that requires them. A tape is
//! built per forward pass and consumed by one `backward` call.

use crate::ops::{self, BnStats, ConvGeom};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

enum OpRecord<S: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    /// Transposed convolution; `geom` describes the underlying convolution
    /// whose input-gradient is this op's forward map.
    Deconv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnStats<S>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Vec<S>,
        running_var: Vec<S>,
        eps: S,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: S,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: OpRecord<S>,
}

/// Output of a train-mode batchnorm: the node plus the batch statistics
/// the caller folds into its running averages.
pub struct BnTrainOut<S: Scalar> {
    pub id: NodeId,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.index()].value
    }

    /// Gradient accumulated by `backward`, if the node required one.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.index()].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: OpRecord<S>) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::Config("tape already consumed by backward".into()));
        }
        // NaN/Inf detection in debug builds only; release relies on the
        // per-batch loss check in the training loops.
        if cfg!(debug_assertions) {
            if let Some(i) = value.find_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value at flat index {i} in op output of shape {:?}",
                    value.shape()
                )));
            }
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(id)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Insert a leaf value. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        self.push(value, requires_grad, OpRecord::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// 2-D convolution: x is NCHW, kernel (c_out, c_in, k, k), bias (c_out).
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Shape(format!("conv2d wants 4-d input/kernel, got {xs:?} and {ks:?}")));
        }
        if ks[2] != ks[3] {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::Shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::Shape(format!("conv2d bias shape {bs:?} != [{}]", ks[0])));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], stride, padding)?;
        let out = ops::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            Some(self.value(bias).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[geom.n, geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.requires(x) || self.requires(kernel) || self.requires(bias);
        self.push(value, rg, OpRecord::Conv2d { x, kernel, bias, geom })
    }

    /// Transposed convolution: x is NCHW with c_in channels, kernel is
    /// (c_in, c_out, k, k), bias (c_out). Output spatial size is exactly
    /// stride * input size; forward is the adjoint of the matching conv2d.
    pub fn deconv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Shape(format!("deconv2d wants 4-d input/kernel, got {xs:?} and {ks:?}")));
        }
        if ks[2] != ks[3] {
            return Err(Error::Shape(format!("deconv2d kernel must be square, got {ks:?}")));
        }
        if xs[1] != ks[0] {
            return Err(Error::Shape(format!(
                "deconv2d input has {} channels but kernel expects {}",
                xs[1], ks[0]
            )));
        }
        if bs != [ks[1]] {
            return Err(Error::Shape(format!("deconv2d bias shape {bs:?} != [{}]", ks[1])));
        }
        let geom = ops::deconv_conv_geom(xs[0], xs[1], xs[2], xs[3], ks[1], ks[2], stride)?;
        let mut out = ops::conv2d_input_grad(self.value(x).data(), self.value(kernel).data(), &geom);
        // Bias broadcast over the (c_out, stride*h, stride*w) planes.
        let plane = geom.h * geom.w;
        let bias_v = self.value(bias).data().to_vec();
        for img in 0..geom.n {
            for ch in 0..geom.c_in {
                let base = (img * geom.c_in + ch) * plane;
                let bv = bias_v[ch];
                for v in &mut out[base..base + plane] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::from_vec(&[geom.n, geom.c_in, geom.h, geom.w], out)?;
        let rg = self.requires(x) || self.requires(kernel) || self.requires(bias);
        self.push(value, rg, OpRecord::Deconv2d { x, kernel, bias, geom })
    }

    /// Row-wise affine map: x (n x d) * w (d x m) + b (m).
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape(format!("dense wants 2-d input/weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::Shape(format!("dense inner dims disagree: {} vs {}", xs[1], ws[0])));
        }
        if bs != [ws[1]] {
            return Err(Error::Shape(format!("dense bias shape {bs:?} != [{}]", ws[1])));
        }
        let (n, m) = (xs[0], ws[1]);
        let mut out = vec![S::ZERO; n * m];
        ops::gemm_ex(n, xs[1], m, S::ONE, self.value(x).data(), false, self.value(w).data(), false, S::ZERO, &mut out);
        let bias = self.value(b).data();
        for row in 0..n {
            for col in 0..m {
                out[row * m + col] += bias[col];
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, rg, OpRecord::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<S> = v.data().iter().map(|&a| a.maxv(S::ZERO)).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        let rg = self.requires(x);
        self.push(value, rg, OpRecord::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<S> = v.data().iter().map(|&a| S::ONE / (S::ONE + (-a).exp())).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        let rg = self.requires(x);
        self.push(value, rg, OpRecord::Sigmoid { x })
    }

    /// Train-mode batchnorm over NCHW input; gamma/beta are (c) nodes.
    /// Returns the batch statistics so the owner can update running
    /// averages. Batches of size 1 are rejected.
    pub fn batchnorm2d_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<BnTrainOut<S>> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batchnorm2d wants NCHW, got {xs:?}")));
        }
        if xs[0] < 2 {
            return Err(Error::Shape("batchnorm train mode needs batch size >= 2".into()));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        self.check_bn_params(c, gamma, beta)?;
        let (out, stats) = ops::batchnorm_train_forward(
            self.value(x).data(),
            n,
            c,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::from_vec(&xs, out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let batch_mean = stats.mean.clone();
        let batch_var = stats.var.clone();
        let id = self.push(value, rg, OpRecord::BnTrain { x, gamma, beta, stats })?;
        Ok(BnTrainOut {
            id,
            batch_mean,
            batch_var,
        })
    }

    /// Eval-mode batchnorm: normalization uses the supplied running
    /// statistics; still differentiable w.r.t. input and gamma/beta.
    pub fn batchnorm2d_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batchnorm2d wants NCHW, got {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("running stats length != channel count".into()));
        }
        let out = ops::batchnorm_eval_forward(
            self.value(x).data(),
            n,
            c,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let value = Tensor::from_vec(&xs, out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            value,
            rg,
            OpRecord::BnEval {
                x,
                gamma,
                beta,
                running_mean: running_mean.to_vec(),
                running_var: running_var.to_vec(),
                eps,
            },
        )
    }

    fn check_bn_params(&self, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm gamma/beta must be [{c}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        Ok(())
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::Shape(format!("softmax_xent wants n x k logits, got {ls:?}")));
        }
        let (loss, probs) = ops::softmax_xent_forward(self.value(logits).data(), ls[0], ls[1], labels)?;
        let rg = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            rg,
            OpRecord::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Sum of squared differences per sample, averaged over the batch
    /// (dimension 0 of the shape).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa != sb {
            return Err(Error::Shape(format!("mse shapes disagree: {sa:?} vs {sb:?}")));
        }
        let n = S::from_f64(sa[0] as f64);
        let mut total = S::ZERO;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = *x - *y;
            total += d * d;
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::scalar(total / n), rg, OpRecord::Mse { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        if sa != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add shapes disagree: {sa:?} vs {:?}",
                self.value(b).shape()
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_vec(&sa, out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, OpRecord::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<S> = v.data().iter().map(|&a| a * factor).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        let rg = self.requires(x);
        self.push(value, rg, OpRecord::Scale { x, factor })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.requires(x);
        self.push(value, rg, OpRecord::Reshape { x })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut total = S::ZERO;
        for v in self.value(x).data() {
            total += *v;
        }
        let rg = self.requires(x);
        self.push(Tensor::scalar(total), rg, OpRecord::Sum { x })
    }

    /// Populate gradients of every node reachable from `loss` that
    /// requires them. Consumes the tape: no further ops or backward
    /// calls are accepted.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Config("tape already consumed by backward".into()));
        }
        if self.nodes[loss.index()].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index()].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.index()].grad = Some(vec![S::ONE]);
        for idx in (0..=loss.index()).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let gout = node.grad.as_ref().unwrap();
            match &node.op {
                OpRecord::Leaf => {}
                OpRecord::Conv2d { x, kernel, bias, geom } => {
                    let need_dx = before[x.index()].requires_grad;
                    let need_dk = before[kernel.index()].requires_grad;
                    let (gx, gk, gb) = ops::conv2d_backward(
                        Some(before[x.index()].value.data()),
                        gout,
                        before[kernel.index()].value.data(),
                        geom,
                        need_dx,
                        need_dk,
                    );
                    if let Some(gx) = gx {
                        add_grad(&mut before[x.index()], &gx);
                    }
                    if let Some(gk) = gk {
                        add_grad(&mut before[kernel.index()], &gk);
                    }
                    if before[bias.index()].requires_grad {
                        add_grad(&mut before[bias.index()], &gb);
                    }
                }
                OpRecord::Deconv2d { x, kernel, bias, geom } => {
                    let need_dx = before[x.index()].requires_grad;
                    let need_dk = before[kernel.index()].requires_grad;
                    let (gx, gk, gb) = ops::deconv2d_backward(
                        Some(before[x.index()].value.data()),
                        gout,
                        before[kernel.index()].value.data(),
                        geom,
                        need_dx,
                        need_dk,
                    );
                    if let Some(gx) = gx {
                        add_grad(&mut before[x.index()], &gx);
                    }
                    if let Some(gk) = gk {
                        add_grad(&mut before[kernel.index()], &gk);
                    }
                    if before[bias.index()].requires_grad {
                        add_grad(&mut before[bias.index()], &gb);
                    }
                }
                OpRecord::Dense { x, w, b } => {
                    let xs = before[x.index()].value.shape();
                    let (n, d) = (xs[0], xs[1]);
                    let m = before[w.index()].value.shape()[1];
                    if before[x.index()].requires_grad {
                        let mut gx = vec![S::ZERO; n * d];
                        ops::gemm_ex(n, m, d, S::ONE, gout, false, before[w.index()].value.data(), true, S::ZERO, &mut gx);
                        add_grad(&mut before[x.index()], &gx);
                    }
                    if before[w.index()].requires_grad {
                        let mut gw = vec![S::ZERO; d * m];
                        ops::gemm_ex(d, n, m, S::ONE, before[x.index()].value.data(), true, gout, false, S::ZERO, &mut gw);
                        add_grad(&mut before[w.index()], &gw);
                    }
                    if before[b.index()].requires_grad {
                        let mut gb = vec![S::ZERO; m];
                        for row in 0..n {
                            for col in 0..m {
                                gb[col] += gout[row * m + col];
                            }
                        }
                        add_grad(&mut before[b.index()], &gb);
                    }
                }
                OpRecord::Relu { x } => {
                    if before[x.index()].requires_grad {
                        // Subgradient at exactly 0 is 0.
                        let gx: Vec<S> = before[x.index()]
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&xv, &g)| if xv > S::ZERO { g } else { S::ZERO })
                            .collect();
                        add_grad(&mut before[x.index()], &gx);
                    }
                }
                OpRecord::Sigmoid { x } => {
                    if before[x.index()].requires_grad {
                        let gx: Vec<S> = node
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&y, &g)| g * y * (S::ONE - y))
                            .collect();
                        add_grad(&mut before[x.index()], &gx);
                    }
                }
                OpRecord::BnTrain { x, gamma, beta, stats } => {
                    let xs = before[x.index()].value.shape();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let (gx, gg, gb) = ops::batchnorm_train_backward(
                        before[x.index()].value.data(),
                        gout,
                        n,
                        c,
                        plane,
                        before[gamma.index()].value.data(),
                        stats,
                    );
                    if before[x.index()].requires_grad {
                        add_grad(&mut before[x.index()], &gx);
                    }
                    if before[gamma.index()].requires_grad {
                        add_grad(&mut before[gamma.index()], &gg);
                    }
                    if before[beta.index()].requires_grad {
                        add_grad(&mut before[beta.index()], &gb);
                    }
                }
                OpRecord::BnEval {
                    x,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let xs = before[x.index()].value.shape();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let (gx, gg, gb) = ops::batchnorm_eval_backward(
                        before[x.index()].value.data(),
                        gout,
                        n,
                        c,
                        plane,
                        before[gamma.index()].value.data(),
                        running_mean,
                        running_var,
                        *eps,
                    );
                    if before[x.index()].requires_grad {
                        add_grad(&mut before[x.index()], &gx);
                    }
                    if before[gamma.index()].requires_grad {
                        add_grad(&mut before[gamma.index()], &gg);
                    }
                    if before[beta.index()].requires_grad {
                        add_grad(&mut before[beta.index()], &gb);
                    }
                }
                OpRecord::SoftmaxXent { logits, labels, probs } => {
                    if before[logits.index()].requires_grad {
                        let ls = before[logits.index()].value.shape();
                        let gl = ops::softmax_xent_backward(probs, ls[0], ls[1], labels, gout[0]);
                        add_grad(&mut before[logits.index()], &gl);
                    }
                }
                OpRecord::Mse { a, b } => {
                    let n = S::from_f64(before[a.index()].value.shape()[0] as f64);
                    let scale = gout[0] * S::from_f64(2.0) / n;
                    if before[a.index()].requires_grad || before[b.index()].requires_grad {
                        let diff: Vec<S> = before[a.index()]
                            .value
                            .data()
                            .iter()
                            .zip(before[b.index()].value.data())
                            .map(|(&av, &bv)| (av - bv) * scale)
                            .collect();
                        if before[a.index()].requires_grad {
                            add_grad(&mut before[a.index()], &diff);
                        }
                        if before[b.index()].requires_grad {
                            let neg: Vec<S> = diff.iter().map(|&d| -d).collect();
                            add_grad(&mut before[b.index()], &neg);
                        }
                    }
                }
                OpRecord::Add { a, b } => {
                    let gout_copy = gout.clone();
                    if before[a.index()].requires_grad {
                        add_grad(&mut before[a.index()], &gout_copy);
                    }
                    if before[b.index()].requires_grad {
                        add_grad(&mut before[b.index()], &gout_copy);
                    }
                }
                OpRecord::Scale { x, factor } => {
                    if before[x.index()].requires_grad {
                        let gx: Vec<S> = gout.iter().map(|&g| g * *factor).collect();
                        add_grad(&mut before[x.index()], &gx);
                    }
                }
                OpRecord::Reshape { x } => {
                    if before[x.index()].requires_grad {
                        let gx = gout.clone();
                        add_grad(&mut before[x.index()], &gx);
                    }
                }
                OpRecord::Sum { x } => {
                    if before[x.index()].requires_grad {
                        let gx = vec![gout[0]; before[x.index()].value.numel()];
                        add_grad(&mut before[x.index()], &gx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_grad<S: Scalar>(node: &mut Node<S>, g: &[S]) {
    debug_assert_eq!(node.value.numel(), g.len());
    let slot = node.grad.get_or_insert_with(|| vec![S::ZERO; node.value.numel()]);
    for (a, b) in slot.iter_mut().zip(g) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Tape::new();
        let x = g.constant(t(&[4], vec![-3.0, 0.0, 2.5, -0.1])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5, 0.0]);
    }

    #[test]
    fn mse_hand_cases() {
        let mut g = Tape::new();
        let a = g.constant(t(&[1, 2], vec![1.0, 1.0])).unwrap();
        let b = g.constant(t(&[1, 2], vec![0.0, 0.0])).unwrap();
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);

        let mut g = Tape::new();
        let a = g.constant(t(&[2, 2], vec![0.5, -1.0, 2.0, 3.0])).unwrap();
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn dense_identity_and_zero_weight() {
        let mut g = Tape::new();
        let x = g.constant(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let wid = g.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let b0 = g.constant(t(&[2], vec![0.0, 0.0])).unwrap();
        let y = g.dense(x, wid, b0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let wz = g.constant(t(&[2, 3], vec![0.0; 6])).unwrap();
        let b = g.constant(t(&[3], vec![5.0, 6.0, 7.0])).unwrap();
        let y = g.dense(x, wz, b).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let xv = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let wv = vec![1.5, -0.2, 0.0, 0.8, -1.1, 0.6];
        let bv = vec![0.25, -0.5];
        let mut g = Tape::new();
        let x = g.constant(t(&[2, 3], xv.clone())).unwrap();
        let w = g.constant(t(&[3, 2], wv.clone())).unwrap();
        let b = g.constant(t(&[2], bv.clone())).unwrap();
        let y = g.dense(x, w, b).unwrap();
        let mut want = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = bv[j];
                for l in 0..3 {
                    acc += xv[i * 3 + l] * wv[l * 2 + j];
                }
                want[i * 2 + j] = acc;
            }
        }
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2, 3], vec![0.5; 6]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2], vec![1.0, 2.0]), true).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_consumes_tape() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2], vec![1.0, 2.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
        assert!(g.sum(x).is_err());
    }

    #[test]
    fn dense_mse_matches_hand_derivation() {
        // loss = mse(x W + b, t) on a 2x2 case; gradients written out by hand:
        // e = x W + b - t, dW = 2/n x^T e, db = 2/n sum_rows e, dx = 2/n e W^T.
        let xv = vec![1.0, 2.0, -0.5, 0.25];
        let wv = vec![0.5, -1.0, 1.5, 0.75];
        let bv = vec![0.1, -0.2];
        let tv = vec![0.0, 1.0, -1.0, 0.5];
        let mut g = Tape::new();
        let x = g.leaf(t(&[2, 2], xv.clone()), true).unwrap();
        let w = g.leaf(t(&[2, 2], wv.clone()), true).unwrap();
        let b = g.leaf(t(&[2], bv.clone()), true).unwrap();
        let target = g.constant(t(&[2, 2], tv.clone())).unwrap();
        let y = g.dense(x, w, b).unwrap();
        let loss = g.mse(y, target).unwrap();
        g.backward(loss).unwrap();

        let mut e = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = bv[j] - tv[i * 2 + j];
                for l in 0..2 {
                    acc += xv[i * 2 + l] * wv[l * 2 + j];
                }
                e[i * 2 + j] = acc;
            }
        }
        let scale = 2.0 / 2.0;
        let mut dw = vec![0.0; 4];
        let mut db = vec![0.0; 2];
        let mut dx = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                db[j] += scale * e[i * 2 + j];
                for l in 0..2 {
                    dw[l * 2 + j] += scale * xv[i * 2 + l] * e[i * 2 + j];
                    dx[i * 2 + l] += scale * e[i * 2 + j] * wv[l * 2 + j];
                }
            }
        }
        for (a, b) in g.grad(w).unwrap().iter().zip(&dw) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in g.grad(b).unwrap().iter().zip(&db) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in g.grad(x).unwrap().iter().zip(&dx) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deconv_is_gradient_of_conv_sum() {
        // d/dy sum(conv2d(y)) is a constant field; deconv2d applied to an
        // all-ones input (zero bias) must reproduce it with the same kernel
        // buffer, read as (c_out_conv, c_in_conv, k, k) on the conv side and
        // (c_in_deconv, c_out_deconv, k, k) on the deconv side.
        let mut seed = 77u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let (n, co_conv, ci_conv, k, stride) = (2usize, 4usize, 2usize, 5usize, 2usize);
        let (h, w) = (8usize, 8usize);
        let kernel: Vec<f64> = (0..co_conv * ci_conv * k * k).map(|_| rnd()).collect();
        let pad = ops::deconv_padding(k, stride);

        let mut g = Tape::new();
        let yv: Vec<f64> = (0..n * ci_conv * h * w).map(|_| rnd()).collect();
        let y = g.leaf(t(&[n, ci_conv, h, w], yv), true).unwrap();
        let kc = g.constant(t(&[co_conv, ci_conv, k, k], kernel.clone())).unwrap();
        let bc = g.constant(t(&[co_conv], vec![0.0; co_conv])).unwrap();
        let c = g.conv2d(y, kc, bc, stride, pad).unwrap();
        let conv_out_shape = g.value(c).shape().to_vec();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        let grad_route = g.grad(y).unwrap().to_vec();

        let mut g2 = Tape::new();
        let ones = g2.constant(Tensor::filled(&conv_out_shape, 1.0)).unwrap();
        let kd = g2.constant(t(&[co_conv, ci_conv, k, k], kernel)).unwrap();
        let b0 = g2.constant(t(&[ci_conv], vec![0.0; ci_conv])).unwrap();
        let d = g2.deconv2d(ones, kd, b0, stride).unwrap();
        assert_eq!(g2.value(d).shape(), &[n, ci_conv, h, w]);
        for (a, b) in g2.value(d).data().iter().zip(&grad_route) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn deconv_zero_input_broadcasts_bias() {
        let mut g = Tape::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let k = g.constant(Tensor::filled(&[2, 3, 5, 5], 0.7)).unwrap();
        let b = g.constant(t(&[3], vec![0.1, -0.2, 0.3])).unwrap();
        let y = g.deconv2d(x, k, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 8, 8]);
        for ch in 0..3 {
            let want = [0.1, -0.2, 0.3][ch];
            for i in 0..64 {
                assert_eq!(g.value(y).data()[ch * 64 + i], want);
            }
        }
    }

    #[test]
    fn conv_shape_mismatch_is_descriptive() {
        let mut g = Tape::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        let k = g.constant(Tensor::zeros(&[4, 2, 3, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4])).unwrap();
        let err = g.conv2d(x, k, b, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn batchnorm_rejects_batch_of_one() {
        let mut g = Tape::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let ga = g.constant(Tensor::filled(&[2], 1.0)).unwrap();
        let be = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(g.batchnorm2d_train(x, ga, be, 1e-5).is_err());
    }

    #[test]
    fn xent_shift_invariance() {
        let logits = vec![0.3, -1.0, 2.0, 0.5, 1.0, -0.5, 0.0, 1.5];
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + if i < 4 { 7.5 } else { -3.25 }).collect();
        let mut g = Tape::new();
        let a = g.constant(t(&[2, 4], logits)).unwrap();
        let l1 = g.softmax_xent(a, &[2, 3]).unwrap();
        let b = g.constant(t(&[2, 4], shifted)).unwrap();
        let l2 = g.softmax_xent(b, &[2, 3]).unwrap();
        let d = (g.value(l1).item().unwrap() - g.value(l2).item().unwrap()).abs();
        assert!(d < 1e-6);
    }
}
