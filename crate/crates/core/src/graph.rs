//! Tape-based reverse-mode differentiation.
//!
//! A `Graph` owns a flat tape of nodes; ops push a node holding the result
//! value plus enough saved state to run its backward rule. Node inputs
//! always have smaller indices, so one reverse sweep visits every node
//! exactly once and accumulates gradients additively. A node whose inputs
//! all have `requires_grad == false` produces a non-tracked node, which is
//! how gradient flow stops below the lowest adapted layer.
//!
//! Normalization comes in two flavours: `bn_train` differentiates through
//! the batch statistics, `norm_fixed` treats the supplied statistics as
//! constants (the interpolated-statistics path at test time).

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Tensor, U8Tensor};

pub const IGNORE_LABEL: u8 = 255;
const DIV_GUARD_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Saved denominators already guarded away from zero.
    Div { a: NodeId, b: NodeId, guarded: Vec<f32> },
    Scale(NodeId, f32),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Channel softmax over NCHW; saves the output probabilities.
    SoftmaxC(NodeId),
    Bilinear { x: NodeId, oh: usize, ow: usize },
    Conv { x: NodeId, w: NodeId, b: NodeId, dims: ConvDims },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, var: Vec<f32>, eps: f32 },
    NormFixed { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, var: Vec<f32>, eps: f32 },
    MaskedCe { logits: NodeId, labels: U8Tensor, probs: Vec<f32>, n_valid: usize },
    MeanEntropy { logits: NodeId, probs: Vec<f32> },
}

pub struct Graph {
    nodes: Vec<Node>,
    guard_hits: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), guard_hits: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Times a guarded division clamped a near-zero denominator.
    pub fn guard_hits(&self) -> u64 {
        self.guard_hits
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(value, self.tracked(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(value, self.tracked(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(value, self.tracked(&[a, b]), Op::Mul(a, b)))
    }

    /// Elementwise division with the denominator clamped away from zero;
    /// each clamped element bumps the guard counter once.
    pub fn div_guarded(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let mut guarded = Vec::with_capacity(self.value(b).len());
        let mut hits = 0u64;
        for &d in self.value(b).data() {
            if d.abs() < DIV_GUARD_EPS {
                guarded.push(if d < 0.0 { -DIV_GUARD_EPS } else { DIV_GUARD_EPS });
                hits += 1;
            } else {
                guarded.push(d);
            }
        }
        self.guard_hits += hits;
        let v: Vec<f32> = self.value(a).data().iter().zip(&guarded).map(|(x, d)| x / d).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(value, self.tracked(&[a, b]), Op::Div { a, b, guarded }))
    }

    pub fn scale(&mut self, x: NodeId, k: f32) -> NodeId {
        let v: Vec<f32> = self.value(x).data().iter().map(|a| k * a).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), v).expect("same shape");
        self.push(value, self.tracked(&[x]), Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(x).data().iter().map(|a| a.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), v).expect("same shape");
        self.push(value, self.tracked(&[x]), Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(x).data().iter().map(|a| a.exp()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), v).expect("same shape");
        self.push(value, self.tracked(&[x]), Op::Exp(x))
    }

    /// Natural log; defined for positive inputs only.
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(x).data().iter().map(|a| a.ln()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), v).expect("same shape");
        self.push(value, self.tracked(&[x]), Op::Ln(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0f32;
        for v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), self.tracked(&[x]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f32;
        let mut acc = 0f32;
        for v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc / n), self.tracked(&[x]), Op::Mean(x))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = vec![0f32; self.value(x).len()];
        softmax_nchw(self.value(x).data(), n, c, h, w, &mut out);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, self.tracked(&[x]), Op::SoftmaxC(x)))
    }

    pub fn bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("bilinear resize to zero extent"));
        }
        let mut out = vec![0f32; n * c * oh * ow];
        kernels::bilinear_forward(self.value(x).data(), n * c, h, w, oh, ow, &mut out);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, self.tracked(&[x]), Op::Bilinear { x, oh, ow }))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, ic, h, iw) = self.value(x).dims4()?;
        let (oc, wic, kh, kw) = self.value(w).dims4()?;
        if wic != ic {
            return Err(Error::shape(format!("conv: input has {ic} channels, weight expects {wic}")));
        }
        if self.value(b).shape() != [oc] {
            return Err(Error::shape(format!(
                "conv: bias shape {:?}, want [{oc}]",
                self.value(b).shape()
            )));
        }
        let dims = ConvDims { n, ic, h, w: iw, oc, kh, kw, stride, pad };
        dims.validate()?;
        let mut out = vec![0f32; n * oc * dims.out_h() * dims.out_w()];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &dims, &mut out);
        let value = Tensor::new(vec![n, oc, dims.out_h(), dims.out_w()], out)?;
        Ok(self.push(value, self.tracked(&[x, w, b]), Op::Conv { x, w, b, dims }))
    }

    /// Batch normalization in training form: `mean`/`var` are the batch
    /// statistics of `x` (biased variance) and backward differentiates
    /// through them.
    pub fn bn_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n * h * w < 2 {
            return Err(Error::contract("bn_train needs at least 2 elements per channel"));
        }
        self.check_norm_shapes(c, gamma, beta, &mean, &var, c)?;
        let value = normalize_value(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps, c)?;
        Ok(self.push(
            value,
            self.tracked(&[x, gamma, beta]),
            Op::BnTrain { x, gamma, beta, mean, var, eps },
        ))
    }

    /// Normalization with externally supplied statistics treated as
    /// constants. `mean`/`var` have length c (shared over the batch) or n*c
    /// (one set per sample, sample-major).
    pub fn norm_fixed(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    ) -> Result<NodeId> {
        let (n, c, _, _) = self.value(x).dims4()?;
        let want = if mean.len() == c { c } else { n * c };
        self.check_norm_shapes(c, gamma, beta, &mean, &var, want)?;
        let value = normalize_value(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps, c)?;
        Ok(self.push(
            value,
            self.tracked(&[x, gamma, beta]),
            Op::NormFixed { x, gamma, beta, mean, var, eps },
        ))
    }

    fn check_norm_shapes(&self, c: usize, gamma: NodeId, beta: NodeId, mean: &[f32], var: &[f32], want: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "norm affine params want [{c}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if mean.len() != want || var.len() != want {
            return Err(Error::shape(format!(
                "norm stats want length {want}, got {} and {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::contract("negative variance"));
        }
        Ok(())
    }

    /// Mean cross-entropy of channel-softmax probabilities against a label
    /// map, averaged over pixels whose label is not IGNORE_LABEL.
    pub fn masked_cross_entropy(&mut self, logits: NodeId, labels: &U8Tensor) -> Result<NodeId> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        let single = labels.shape() == [h, w] && n == 1;
        if !single && labels.shape() != [n, h, w] {
            return Err(Error::shape(format!(
                "labels {:?} vs logits batch {n}x{h}x{w}",
                labels.shape()
            )));
        }
        if labels.data().iter().any(|&l| l != IGNORE_LABEL && l as usize >= c) {
            return Err(Error::contract(format!("label out of range for {c} classes")));
        }
        let n_valid = labels.data().iter().filter(|&&l| l != IGNORE_LABEL).count();
        if n_valid == 0 {
            return Err(Error::contract("no labelled pixels in cross-entropy"));
        }
        let hw = h * w;
        let z = self.value(logits).data();
        let mut probs = vec![0f32; n * c * hw];
        let mut loss = 0f32;
        let mut logp = vec![0f32; c];
        for ni in 0..n {
            let zb = &z[ni * c * hw..][..c * hw];
            let pb = &mut probs[ni * c * hw..][..c * hw];
            for p in 0..hw {
                pixel_log_softmax(zb, p, c, hw, &mut logp);
                for (ci, lp) in logp.iter().enumerate() {
                    pb[ci * hw + p] = lp.exp();
                }
                let l = labels.data()[ni * hw + p];
                if l != IGNORE_LABEL {
                    loss -= logp[l as usize];
                }
            }
        }
        loss /= n_valid as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            self.tracked(&[logits]),
            Op::MaskedCe { logits, labels: labels.clone(), probs, n_valid },
        ))
    }

    /// Mean per-pixel entropy of channel-softmax probabilities.
    pub fn mean_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        let z = self.value(logits).data();
        let mut probs = vec![0f32; n * c * hw];
        let mut total = 0f32;
        let mut logp = vec![0f32; c];
        for ni in 0..n {
            let zb = &z[ni * c * hw..][..c * hw];
            let pb = &mut probs[ni * c * hw..][..c * hw];
            for p in 0..hw {
                pixel_log_softmax(zb, p, c, hw, &mut logp);
                let mut hpx = 0f32;
                for (ci, lp) in logp.iter().enumerate() {
                    let pv = lp.exp();
                    pb[ci * hw + p] = pv;
                    hpx -= pv * lp;
                }
                total += hpx;
            }
        }
        let value = Tensor::scalar(total / (n * hw) as f32);
        Ok(self.push(value, self.tracked(&[logits]), Op::MeanEntropy { logits, probs }))
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in
    /// reverse creation order; input gradients accumulate additively.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::contract("backward root does not depend on any tracked leaf"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_ref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(head, *a, |_, gr| axpy(gr, 1.0, g.data()));
                    add_into(head, *b, |_, gr| axpy(gr, 1.0, g.data()));
                }
                Op::Sub(a, b) => {
                    add_into(head, *a, |_, gr| axpy(gr, 1.0, g.data()));
                    add_into(head, *b, |_, gr| axpy(gr, -1.0, g.data()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (head[a.0].value.data().to_vec(), head[b.0].value.data().to_vec());
                    add_into(head, *a, |_, gr| {
                        for i in 0..gr.len() {
                            gr[i] += g.data()[i] * bv[i];
                        }
                    });
                    add_into(head, *b, |_, gr| {
                        for i in 0..gr.len() {
                            gr[i] += g.data()[i] * av[i];
                        }
                    });
                }
                Op::Div { a, b, guarded } => {
                    let av = head[a.0].value.data().to_vec();
                    add_into(head, *a, |_, gr| {
                        for i in 0..gr.len() {
                            gr[i] += g.data()[i] / guarded[i];
                        }
                    });
                    add_into(head, *b, |_, gr| {
                        for i in 0..gr.len() {
                            gr[i] -= g.data()[i] * av[i] / (guarded[i] * guarded[i]);
                        }
                    });
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    add_into(head, *x, |_, gr| axpy(gr, k, g.data()));
                }
                Op::Relu(x) => {
                    add_into(head, *x, |xv, gr| {
                        for i in 0..gr.len() {
                            if xv.data()[i] > 0.0 {
                                gr[i] += g.data()[i];
                            }
                        }
                    });
                }
                Op::Exp(x) => {
                    let yv = node.value.data();
                    add_into(head, *x, |_, gr| {
                        for i in 0..gr.len() {
                            gr[i] += g.data()[i] * yv[i];
                        }
                    });
                }
                Op::Ln(x) => {
                    add_into(head, *x, |xv, gr| {
                        for i in 0..gr.len() {
                            gr[i] += g.data()[i] / xv.data()[i];
                        }
                    });
                }
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    add_into(head, *x, |_, gr| {
                        for v in gr.iter_mut() {
                            *v += gs;
                        }
                    });
                }
                Op::Mean(x) => {
                    let gs = g.data()[0];
                    add_into(head, *x, |_, gr| {
                        let n = gr.len() as f32;
                        for v in gr.iter_mut() {
                            *v += gs / n;
                        }
                    });
                }
                Op::SoftmaxC(x) => {
                    let (n, c, h, w) = node.value.dims4().expect("softmax output is 4-d");
                    let p = node.value.data();
                    let hw = h * w;
                    add_into(head, *x, |_, gr| {
                        for ni in 0..n {
                            let base = ni * c * hw;
                            for px in 0..hw {
                                let mut dot = 0f32;
                                for ci in 0..c {
                                    let idx = base + ci * hw + px;
                                    dot += g.data()[idx] * p[idx];
                                }
                                for ci in 0..c {
                                    let idx = base + ci * hw + px;
                                    gr[idx] += p[idx] * (g.data()[idx] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Bilinear { x, oh, ow } => {
                    let (oh, ow) = (*oh, *ow);
                    add_into(head, *x, |xv, gr| {
                        let (n, c, h, w) = xv.dims4().expect("bilinear input is 4-d");
                        kernels::bilinear_backward(g.data(), n * c, h, w, oh, ow, gr);
                    });
                }
                Op::Conv { x, w, b, dims } => {
                    if head[w.0].requires_grad {
                        let mut gw = vec![0f32; head[w.0].value.len()];
                        let mut gb = vec![0f32; head[b.0].value.len()];
                        kernels::conv2d_backward_weights(g.data(), head[x.0].value.data(), dims, &mut gw, &mut gb);
                        add_into(head, *w, |_, gr| axpy(gr, 1.0, &gw));
                        add_into(head, *b, |_, gr| axpy(gr, 1.0, &gb));
                    } else if head[b.0].requires_grad {
                        let mut gw = vec![0f32; head[w.0].value.len()];
                        let mut gb = vec![0f32; head[b.0].value.len()];
                        kernels::conv2d_backward_weights(g.data(), head[x.0].value.data(), dims, &mut gw, &mut gb);
                        add_into(head, *b, |_, gr| axpy(gr, 1.0, &gb));
                    }
                    if head[x.0].requires_grad {
                        let wv = head[w.0].value.data().to_vec();
                        add_into(head, *x, |_, gr| {
                            kernels::conv2d_backward_input(g.data(), &wv, dims, gr);
                        });
                    }
                }
                Op::BnTrain { x, gamma, beta, mean, var, eps } => {
                    bn_train_backward(head, g, *x, *gamma, *beta, mean, var, *eps);
                }
                Op::NormFixed { x, gamma, beta, mean, var, eps } => {
                    norm_fixed_backward(head, g, *x, *gamma, *beta, mean, var, *eps);
                }
                Op::MaskedCe { logits, labels, probs, n_valid } => {
                    let gs = g.data()[0] / *n_valid as f32;
                    add_into(head, *logits, |lv, gr| {
                        let (n, c, h, w) = lv.dims4().expect("logits are 4-d");
                        let hw = h * w;
                        for ni in 0..n {
                            let base = ni * c * hw;
                            for p in 0..hw {
                                let l = labels.data()[ni * hw + p];
                                if l == IGNORE_LABEL {
                                    continue;
                                }
                                for ci in 0..c {
                                    let onehot = if ci == l as usize { 1.0 } else { 0.0 };
                                    gr[base + ci * hw + p] += gs * (probs[base + ci * hw + p] - onehot);
                                }
                            }
                        }
                    });
                }
                Op::MeanEntropy { logits, probs } => {
                    let gs = g.data()[0];
                    add_into(head, *logits, |lv, gr| {
                        let (n, c, h, w) = lv.dims4().expect("logits are 4-d");
                        let hw = h * w;
                        let m = (n * hw) as f32;
                        for ni in 0..n {
                            let base = ni * c * hw;
                            for px in 0..hw {
                                let mut hpx = 0f32;
                                for ci in 0..c {
                                    let p = probs[base + ci * hw + px];
                                    if p > 0.0 {
                                        hpx -= p * p.ln();
                                    }
                                }
                                for ci in 0..c {
                                    let p = probs[base + ci * hw + px];
                                    if p > 0.0 {
                                        gr[base + ci * hw + px] -= gs * p * (p.ln() + hpx) / m;
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// gr += k * src
fn axpy(gr: &mut [f32], k: f32, src: &[f32]) {
    for i in 0..gr.len() {
        gr[i] += k * src[i];
    }
}

/// Accumulate into node `j`'s gradient buffer unless it is untracked.
/// The closure sees the node's value and its zero-initialized gradient.
fn add_into(head: &mut [Node], j: NodeId, f: impl FnOnce(&Tensor, &mut [f32])) {
    let node = &mut head[j.0];
    if !node.requires_grad {
        return;
    }
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape()));
    }
    let Node { value, grad, .. } = node;
    f(value, grad.as_mut().expect("just initialized").data_mut());
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, stats of length c
/// (broadcast over batch) or n*c (per sample).
fn normalize_value(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f32], var: &[f32], eps: f32, c: usize) -> Result<Tensor> {
    let (n, xc, h, w) = x.dims4()?;
    if xc != c {
        return Err(Error::shape(format!("norm: {xc} channels vs {c} stats")));
    }
    let hw = h * w;
    let per_sample = mean.len() == n * c;
    let mut out = vec![0f32; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let si = if per_sample { ni * c + ci } else { ci };
            let s = 1.0 / (var[si] + eps).sqrt();
            let (m, ga, be) = (mean[si], gamma.data()[ci], beta.data()[ci]);
            let xs = &x.data()[(ni * c + ci) * hw..][..hw];
            let os = &mut out[(ni * c + ci) * hw..][..hw];
            for i in 0..hw {
                os[i] = ga * (xs[i] - m) * s + be;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn norm_fixed_backward(head: &mut [Node], g: &Tensor, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f32], var: &[f32], eps: f32) {
    let (n, c, h, w) = head[x.0].value.dims4().expect("norm input is 4-d");
    let hw = h * w;
    let per_sample = mean.len() == n * c;
    let gammas = head[gamma.0].value.data().to_vec();
    // channel sums for the affine gradients
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    {
        let xv = head[x.0].value.data();
        for ni in 0..n {
            for ci in 0..c {
                let si = if per_sample { ni * c + ci } else { ci };
                let s = 1.0 / (var[si] + eps).sqrt();
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xhat = (xv[base + i] - mean[si]) * s;
                    dgamma[ci] += g.data()[base + i] * xhat;
                    dbeta[ci] += g.data()[base + i];
                }
            }
        }
    }
    add_into(head, gamma, |_, gr| axpy(gr, 1.0, &dgamma));
    add_into(head, beta, |_, gr| axpy(gr, 1.0, &dbeta));
    add_into(head, x, |_, gr| {
        for ni in 0..n {
            for ci in 0..c {
                let si = if per_sample { ni * c + ci } else { ci };
                let k = gammas[ci] / (var[si] + eps).sqrt();
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    gr[base + i] += g.data()[base + i] * k;
                }
            }
        }
    });
}

fn bn_train_backward(head: &mut [Node], g: &Tensor, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f32], var: &[f32], eps: f32) {
    let (n, c, h, w) = head[x.0].value.dims4().expect("bn input is 4-d");
    let hw = h * w;
    let m = (n * hw) as f32;
    let gammas = head[gamma.0].value.data().to_vec();
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    {
        let xv = head[x.0].value.data();
        for ci in 0..c {
            let s = 1.0 / (var[ci] + eps).sqrt();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xhat = (xv[base + i] - mean[ci]) * s;
                    dgamma[ci] += g.data()[base + i] * xhat;
                    dbeta[ci] += g.data()[base + i];
                }
            }
        }
    }
    let (sum_g, sum_gx) = (dbeta.clone(), dgamma.clone());
    add_into(head, gamma, |_, gr| axpy(gr, 1.0, &dgamma));
    add_into(head, beta, |_, gr| axpy(gr, 1.0, &dbeta));
    add_into(head, x, |xv, gr| {
        for ci in 0..c {
            let s = 1.0 / (var[ci] + eps).sqrt();
            let k = gammas[ci] * s;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xhat = (xv.data()[base + i] - mean[ci]) * s;
                    gr[base + i] += k * (g.data()[base + i] - sum_g[ci] / m - xhat * sum_gx[ci] / m);
                }
            }
        }
    });
}

/// Stable per-pixel log-softmax over the channel axis of one CHW block.
#[inline]
fn pixel_log_softmax(z: &[f32], px: usize, c: usize, hw: usize, out: &mut [f32]) {
    let mut mx = f32::NEG_INFINITY;
    for ci in 0..c {
        mx = mx.max(z[ci * hw + px]);
    }
    let mut lse = 0f32;
    for ci in 0..c {
        lse += (z[ci * hw + px] - mx).exp();
    }
    let lse = lse.ln();
    for ci in 0..c {
        out[ci] = z[ci * hw + px] - mx - lse;
    }
}

/// Channel softmax over NCHW data, written into `out`.
pub fn softmax_nchw(x: &[f32], n: usize, c: usize, h: usize, w: usize, out: &mut [f32]) {
    debug_assert_eq!(x.len(), n * c * h * w);
    debug_assert_eq!(out.len(), x.len());
    let hw = h * w;
    let mut logp = vec![0f32; c];
    for ni in 0..n {
        let zb = &x[ni * c * hw..][..c * hw];
        let ob = &mut out[ni * c * hw..][..c * hw];
        for px in 0..hw {
            pixel_log_softmax(zb, px, c, hw, &mut logp);
            for ci in 0..c {
                ob[ci * hw + px] = logp[ci].exp();
            }
        }
    }
}

/// Compare the tape gradient of `build(graph, leaf(x))` against central
/// finite differences (step 1e-3). Returns the worst relative error, where
/// the denominator is floored to keep tiny gradients from blowing it up.
pub fn gradcheck<F>(build: F, x: &Tensor) -> Result<f32>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    const H: f32 = 1e-3;
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true);
    let root = build(&mut g, xid)?;
    if !g.value(root).is_scalar() {
        return Err(Error::contract("gradcheck target must be scalar"));
    }
    g.backward(root)?;
    let analytic = g
        .grad(xid)
        .ok_or_else(|| Error::contract("gradcheck: no gradient reached the leaf"))?
        .clone();
    let eval = |pt: &Tensor| -> Result<f32> {
        let mut g = Graph::new();
        let xid = g.leaf(pt.clone(), false);
        let root = build(&mut g, xid)?;
        g.value(root).scalar_value()
    };
    let mut worst = 0f32;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * H);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.1);
        worst = worst.max(rel);
    }
    Ok(worst)
}
