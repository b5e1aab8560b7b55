//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value and whatever context
//! the backward rule needs. Nodes only ever reference earlier nodes, so the
//! append order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient-reversal multiplier `-(lambda * tau)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalScale {
    lambda: f64,
    tau: f64,
}

impl ReversalScale {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("reversal lambda must be >= 0, got {lambda}")));
        }
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::config(format!("reversal tau must be in [0, 1), got {tau}")));
        }
        Ok(Self { lambda, tau })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Factor applied to the upstream gradient.
    pub fn multiplier(&self) -> f64 {
        -(self.lambda * self.tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: NodeId,
        geom: PoolGeom,
    },
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    GradReversal(NodeId, f64),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) | Op::GlobalAvgPool(a) | Op::GradReversal(a, _) => {
                vec![*a]
            }
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::MaxPool { input, .. } | Op::AvgPool { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; nodes the loss does not
    /// depend on yield `None` unless they are leaves (leaves always get a
    /// tensor, zero when unused).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn binary_shapes_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || b.is_scalar()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Input ids of a node, for inspection.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Branch taken by every piecewise op, in tape order: one flag per ReLU
    /// input element (positive or not) and the winning index of every
    /// max-pool window. Two evaluations with equal patterns lie on the same
    /// smooth piece of the function.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&v| (v > 0.0) as usize)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let need_b = || b.ok_or_else(|| Error::shape(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !binary_shapes_ok(ta, tb) {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = if tb.is_scalar() {
            let s = tb.data()[0];
            ta.data().iter().map(|&x| f(x, s)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x + y, "add")?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x - y, "sub")?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Relu(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `[N×K] · [K×M] -> [N×M]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[n, k], &[k2, m]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, ta.data(), k as isize, 1, tb.data(), m as isize, 1, 0.0, &mut out);
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a length-`M` bias to every row of an `[N×M]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let &[_, m] = tx.shape() else {
            return Err(Error::shape(format!("add_bias needs [N, M], got {:?}", tx.shape())));
        };
        if tb.shape() != [m] {
            return Err(Error::shape(format!("bias {:?} does not match width {m}", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    /// Cross-correlation of `[B×C×H×W]` with `[F×C×kh×kw]` plus per-filter bias.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let &[batch, channels, height, width] = ti.shape() else {
            return Err(Error::shape(format!("conv2d input must be rank 4, got {:?}", ti.shape())));
        };
        let &[filters, kc, kh, kw] = tk.shape() else {
            return Err(Error::shape(format!("conv2d kernel must be rank 4, got {:?}", tk.shape())));
        };
        if kc != channels {
            return Err(Error::shape(format!("conv2d kernel has {kc} channels, input has {channels}")));
        }
        if tb.shape() != [filters] {
            return Err(Error::shape(format!("conv2d bias {:?} for {filters} filters", tb.shape())));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        let geom = ConvGeom {
            batch,
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, ti.data(), tk.data(), tb.data());
        let v = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn pool2d(&mut self, kind: PoolKind, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let ti = self.value(input);
        let &[batch, channels, height, width] = ti.shape() else {
            return Err(Error::shape(format!("pool2d input must be rank 4, got {:?}", ti.shape())));
        };
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool2d window and stride must be positive"));
        }
        if window > height || window > width {
            return Err(Error::shape(format!(
                "pool2d window {window} exceeds input {height}x{width}"
            )));
        }
        let geom = PoolGeom {
            planes: batch * channels,
            height,
            width,
            window,
            stride,
            out_h: (height - window) / stride + 1,
            out_w: (width - window) / stride + 1,
        };
        let shape = vec![batch, channels, geom.out_h, geom.out_w];
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool_forward(&geom, ti.data());
                let v = Tensor::new(shape, out)?;
                self.push(v, Op::MaxPool { input, argmax })
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(&geom, ti.data());
                let v = Tensor::new(shape, out)?;
                self.push(v, Op::AvgPool { input, geom })
            }
        })
    }

    /// `[B×C×H×W] -> [B×C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let ti = self.value(input);
        let &[batch, channels, height, width] = ti.shape() else {
            return Err(Error::shape(format!(
                "global_avg_pool input must be rank 4, got {:?}",
                ti.shape()
            )));
        };
        let area = height * width;
        let inv = 1.0 / area as f64;
        let data = ti.data().chunks(area).map(|p| p.iter().sum::<f64>() * inv).collect();
        let v = Tensor::new(vec![batch, channels], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(input)))
    }

    /// Mean cross-entropy over the batch. Returns the scalar loss node and the
    /// softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, Tensor)> {
        let tl = self.value(logits);
        let &[batch, classes] = tl.shape() else {
            return Err(Error::shape(format!("logits must be [B, K], got {:?}", tl.shape())));
        };
        if labels.len() != batch {
            return Err(Error::shape(format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel { label, bound: classes });
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &label) in tl.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            loss -= row[label] - max - log_denom;
            probs.extend(row.iter().map(|&z| (z - max).exp() / denom));
        }
        loss /= batch as f64;
        let probs = Tensor::new(vec![batch, classes], probs)?;
        let id = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
        );
        Ok((id, probs))
    }

    /// Identity forward; the backward pass multiplies by `-(lambda * tau)`.
    pub fn grad_reversal(&mut self, x: NodeId, scale: ReversalScale) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::GradReversal(x, scale.multiplier()))
    }

    /// Reverse sweep from a scalar node. Leaves the loss does not reach get
    /// zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::new(root.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if slot.is_none() && matches!(node.op, Op::Leaf) {
                *slot = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data).expect("shape from node");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, reduce_to(val(*b), g.data().to_vec()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                let neg = g.data().iter().map(|v| -v).collect();
                accumulate(grads, *b, reduce_to(val(*b), neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga: Vec<f64> = if tb.is_scalar() && ta.shape() != tb.shape() {
                    let s = tb.data()[0];
                    g.data().iter().map(|v| v * s).collect()
                } else {
                    g.data().iter().zip(tb.data()).map(|(v, y)| v * y).collect()
                };
                let gb: Vec<f64> = g.data().iter().zip(ta.data()).map(|(v, x)| v * x).collect();
                accumulate(grads, *a, shaped(ta, ga));
                accumulate(grads, *b, reduce_to(tb, gb));
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                    .collect();
                accumulate(grads, *a, shaped(ta, d));
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                accumulate(grads, *a, shaped(val(*a), d));
            }
            Op::GradReversal(a, m) => {
                let d = g.data().iter().map(|v| v * m).collect();
                accumulate(grads, *a, shaped(val(*a), d));
            }
            Op::Sum(a) => {
                let ta = val(*a);
                accumulate(grads, *a, shaped(ta, vec![g.data()[0]; ta.numel()]));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; n * k];
                // g (n×m) · bᵀ (m×k)
                kernels::gemm(n, m, k, g.data(), m as isize, 1, tb.data(), 1, m as isize, 0.0, &mut ga);
                let mut gb = vec![0.0; k * m];
                // aᵀ (k×n) · g (n×m)
                kernels::gemm(k, n, m, ta.data(), 1, k as isize, g.data(), m as isize, 1, 0.0, &mut gb);
                accumulate(grads, *a, shaped(ta, ga));
                accumulate(grads, *b, shaped(tb, gb));
            }
            Op::AddBias(x, bias) => {
                let tb = val(*bias);
                let m = tb.numel();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, shaped(tb, gb));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let (di, dk, db) = kernels::conv2d_backward(geom, ti.data(), tk.data(), g.data());
                accumulate(grads, *input, shaped(ti, di));
                accumulate(grads, *kernel, shaped(tk, dk));
                accumulate(grads, *bias, shaped(val(*bias), db));
            }
            Op::MaxPool { input, argmax } => {
                let ti = val(*input);
                let mut d = vec![0.0; ti.numel()];
                for (v, &src) in g.data().iter().zip(argmax) {
                    d[src] += v;
                }
                accumulate(grads, *input, shaped(ti, d));
            }
            Op::AvgPool { input, geom } => {
                let ti = val(*input);
                let mut d = vec![0.0; ti.numel()];
                kernels::avg_pool_backward(geom, g.data(), &mut d);
                accumulate(grads, *input, shaped(ti, d));
            }
            Op::GlobalAvgPool(input) => {
                let ti = val(*input);
                let s = ti.shape();
                let area = s[2] * s[3];
                let inv = 1.0 / area as f64;
                let mut d = Vec::with_capacity(ti.numel());
                for v in g.data() {
                    d.extend(std::iter::repeat_n(v * inv, area));
                }
                accumulate(grads, *input, shaped(ti, d));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.shape()[1];
                let upstream = g.data()[0] / batch as f64;
                let mut d = probs.data().to_vec();
                for (row, &label) in d.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= upstream;
                    }
                }
                accumulate(grads, *logits, shaped(val(*logits), d));
            }
        }
    }
}

/// Reduce a full-size gradient onto a broadcast scalar operand when needed.
fn reduce_to(target: &Tensor, full: Vec<f64>) -> Tensor {
    if target.numel() == full.len() {
        Tensor::new(target.shape().to_vec(), full).expect("matching size")
    } else {
        Tensor::new(target.shape().to_vec(), vec![full.iter().sum()]).expect("scalar")
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape of x")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let s = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let r_in = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.elementwise(Elementwise::Relu, r_in, None).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let bad = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, bad), Err(Error::InvalidShape(_))));
        assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
    }

    #[test]
    fn mul_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[2.0]));
        let b = tape.leaf(t(&[1], &[5.0]));
        let p = tape.mul(a, b).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        let l = tape.sum(p);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
        assert!(tape.matmul(row, row).is_err());
    }

    #[test]
    fn conv_identity_and_window_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let k3 = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let y = tape.conv2d(ones, k3, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_output_extent_and_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 7, 5], 1.0).unwrap());
        let k = tape.leaf(Tensor::full(&[2, 1, 3, 3], 1.0).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]).unwrap());
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 4, 3]);

        let big = tape.leaf(Tensor::full(&[1, 1, 9, 9], 1.0).unwrap());
        let b1 = tape.leaf(Tensor::zeros(&[1]).unwrap());
        assert!(matches!(tape.conv2d(x, big, b1, 1, 0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mx = tape.pool2d(PoolKind::Max, x, 2, 2).unwrap();
        let av = tape.pool2d(PoolKind::Avg, x, 2, 2).unwrap();
        assert_eq!(tape.value(mx).data(), &[4.0]);
        assert_eq!(tape.value(av).data(), &[2.5]);
        assert!(tape.pool2d(PoolKind::Max, x, 3, 1).is_err());
    }

    #[test]
    fn max_pool_tie_goes_to_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[4.0, 4.0, 0.0, 0.0]));
        let mx = tape.pool2d(PoolKind::Max, x, 2, 2).unwrap();
        let l = tape.sum(mx);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[1, 1, 3, 3], 3.0).unwrap());
        let g = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0]);

        let p = tape.leaf(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
        let g = tape.global_avg_pool(p).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0]);
        let l = tape.sum(g);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(&[1, 6]).unwrap());
        let (loss, probs) = tape.softmax_cross_entropy(uniform, &[2]).unwrap();
        assert!((tape.value(loss).data()[0] - 6f64.ln()).abs() < 1e-12);
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let peaked = tape.leaf(t(&[1, 3], &[0.0, 800.0, 0.0]));
        let (loss, _) = tape.softmax_cross_entropy(peaked, &[1]).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);

        assert!(matches!(
            tape.softmax_cross_entropy(peaked, &[3]),
            Err(Error::InvalidLabel { label: 3, bound: 3 })
        ));
    }

    #[test]
    fn grad_reversal_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        let r = tape.grad_reversal(x, ReversalScale::new(1.0, 0.5).unwrap());
        assert_eq!(tape.value(r).data(), &[1.5, -2.0]);
        let two = tape.leaf(t(&[2], &[2.0, 2.0]));
        let m = tape.mul(r, two).unwrap();
        let l = tape.sum(m);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        let r = tape.grad_reversal(x, ReversalScale::new(0.0, 0.5).unwrap());
        let l = tape.sum(r);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));

        assert!(matches!(ReversalScale::new(-1.0, 0.5), Err(Error::InvalidConfig(_))));
        assert!(ReversalScale::new(1.0, 1.0).is_err());
    }

    #[test]
    fn backward_sum_and_fanout() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let l = tape.sum(x);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, 4.0);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient_and_nonscalar_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2, 2], &[1.0; 4]));
        let l = tape.sum(x);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
        assert!(matches!(tape.backward(x), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn activation_pattern_tracks_branches() {
        let pattern = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(t(&[1, 1, 2, 2], x));
            let r = tape.relu(a);
            tape.pool2d(PoolKind::Max, r, 2, 2).unwrap();
            tape.activation_pattern()
        };
        assert_eq!(pattern(&[1.0, -1.0, 3.0, 0.0]), vec![1, 0, 1, 0, 2]);
        assert_eq!(pattern(&[1.0, -1.0, 3.0, 0.5]), vec![1, 0, 1, 1, 2]);
        assert_eq!(pattern(&[4.0, -1.0, 3.0, 0.5]), vec![1, 0, 1, 1, 0]);
    }

    #[test]
    fn finite_diff_examples() {
        let x = t(&[1], &[3.0]);
        let g = finite_diff_gradient(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_| 4.2, &x, 1e-5);
        assert_eq!(g.data(), &[0.0]);
    }
}
