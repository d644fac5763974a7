use std::collections::BTreeMap;

use super::kernels::{self, BatchStats, BnMode, ConvGeometry};
use super::{ParamId, Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Gradients keyed by parameter leaf, in parameter order.
pub type Gradients<T> = BTreeMap<ParamId, Tensor<T>>;

enum Op<T> {
    Input,
    Param { id: ParamId, trainable: bool },
    Conv2d { input: NodeId, weight: NodeId, geom: ConvGeometry },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { input: NodeId },
    GlobalAvgPool { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    SoftmaxEntropy { logits: NodeId, probs: Tensor<T>, log_probs: Tensor<T> },
    WeightedMean { input: NodeId, weights: Vec<T>, denom: T },
    CrossEntropy { logits: NodeId, probs: Tensor<T>, targets: Vec<usize>, smoothing: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    label: String,
    requires_grad: bool,
}

/// Record of one forward pass: every kernel application in order, with the
/// activations its backward needs. Consumed by a single [`Graph::backward`].
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Probabilities saved by a softmax-entropy node.
    pub fn probs(&self, id: NodeId) -> Option<&Tensor<T>> {
        match &self.nodes[id].op {
            Op::SoftmaxEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, label: &str, requires_grad: bool) -> Result<NodeId> {
        value.ensure_finite(label)?;
        self.nodes.push(Node { value, op, label: label.to_string(), requires_grad });
        Ok(self.nodes.len() - 1)
    }

    fn grad_needed(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Input, "input", false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool, label: &str) -> Result<NodeId> {
        self.push(value, Op::Param { id, trainable }, label, trainable)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, geom: ConvGeometry, label: &str) -> Result<NodeId> {
        let value = kernels::conv2d(self.value(input), self.value(weight), geom)?;
        let rg = self.grad_needed(&[input, weight]);
        self.push(value, Op::Conv2d { input, weight, geom }, label, rg)
    }

    /// Batch norm; in `Train` mode the batch statistics are returned so the
    /// caller can fold them into its running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[T], &[T])>,
        mode: BnMode,
        label: &str,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let out = kernels::batch_norm(self.value(input), self.value(gamma), self.value(beta), running, mode, kernels::BN_EPS)?;
        let rg = self.grad_needed(&[input, gamma, beta]);
        let op = Op::BatchNorm { input, gamma, beta, xhat: out.xhat, inv_std: out.inv_std, batch_stats: mode.uses_batch_stats() };
        let id = self.push(out.output, op, label, rg)?;
        Ok((id, out.batch_stats))
    }

    pub fn relu(&mut self, input: NodeId, label: &str) -> Result<NodeId> {
        let value = kernels::relu(self.value(input));
        let rg = self.grad_needed(&[input]);
        self.push(value, Op::Relu { input }, label, rg)
    }

    pub fn global_avg_pool(&mut self, input: NodeId, label: &str) -> Result<NodeId> {
        let value = kernels::global_avg_pool(self.value(input))?;
        let rg = self.grad_needed(&[input]);
        self.push(value, Op::GlobalAvgPool { input }, label, rg)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId, label: &str) -> Result<NodeId> {
        let value = kernels::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.grad_needed(&[input, weight, bias]);
        self.push(value, Op::Linear { input, weight, bias }, label, rg)
    }

    /// Per-row entropy of `softmax(logits)`; probabilities are kept on the node.
    pub fn softmax_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let (probs, log_probs, entropy) = kernels::softmax_entropy(self.value(logits))?;
        let rg = self.grad_needed(&[logits]);
        self.push(entropy, Op::SoftmaxEntropy { logits, probs, log_probs }, "entropy", rg)
    }

    /// Scalar `Σ_i w_i x_i / denom`. The weights are constants: no gradient
    /// flows into them.
    pub fn weighted_mean(&mut self, input: NodeId, weights: Vec<T>, denom: T) -> Result<NodeId> {
        let x = self.value(input);
        if weights.len() != x.numel() {
            return Err(Error::Shape(format!("{} weights for {} values", weights.len(), x.numel())));
        }
        let total: T = x.data().iter().zip(&weights).map(|(&v, &w)| v * w).sum();
        let rg = self.grad_needed(&[input]);
        self.push(Tensor::scalar(total / denom), Op::WeightedMean { input, weights, denom }, "weighted mean", rg)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], smoothing: f64) -> Result<NodeId> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), targets, smoothing)?;
        let rg = self.grad_needed(&[logits]);
        let op = Op::CrossEntropy { logits, probs, targets: targets.to_vec(), smoothing };
        self.push(Tensor::scalar(loss), op, "cross entropy", rg)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// trainable parameter leaf. Leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph; record a new forward pass".into()));
        }
        self.consumed = true;
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Graph(format!("loss must be a scalar, got shape {:?}", self.nodes[loss].value.shape())));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), T::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at layer '{}'", self.nodes[id].label)));
            }
            let node = &self.nodes[id];
            let mut contributions: Vec<(NodeId, Tensor<T>)> = Vec::new();
            let needs = |i: NodeId| self.nodes[i].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, geom } => {
                    let (gi, gw) =
                        kernels::conv2d_backward(self.value(*input), self.value(*weight), &g, *geom, needs(*input), needs(*weight))?;
                    contributions.extend(gi.map(|t| (*input, t)));
                    contributions.extend(gw.map(|t| (*weight, t)));
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                    let (gi, gg, gb) = kernels::batch_norm_backward(&g, xhat, self.value(*gamma), inv_std, *batch_stats)?;
                    contributions.push((*input, gi));
                    contributions.push((*gamma, gg));
                    contributions.push((*beta, gb));
                }
                Op::Relu { input } => {
                    contributions.push((*input, kernels::relu_backward(self.value(*input), &g)));
                }
                Op::GlobalAvgPool { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    contributions.push((*input, kernels::global_avg_pool_backward(&shape, &g)?));
                }
                Op::Linear { input, weight, bias } => {
                    let (gi, gw, gb) = kernels::linear_backward(self.value(*input), self.value(*weight), &g)?;
                    contributions.push((*input, gi));
                    contributions.push((*weight, gw));
                    contributions.push((*bias, gb));
                }
                Op::SoftmaxEntropy { logits, probs, log_probs } => {
                    let gz = kernels::softmax_entropy_backward(probs, log_probs, &node.value, &g)?;
                    contributions.push((*logits, gz));
                }
                Op::WeightedMean { input, weights, denom } => {
                    let scale = g.data()[0] / *denom;
                    let shape = self.value(*input).shape().to_vec();
                    let data = weights.iter().map(|&w| w * scale).collect();
                    contributions.push((*input, Tensor::new(shape, data)?));
                }
                Op::CrossEntropy { logits, probs, targets, smoothing } => {
                    let gz = kernels::cross_entropy_backward(probs, targets, *smoothing, g.data()[0])?;
                    contributions.push((*logits, gz));
                }
            }
            for (target, contribution) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut out = Gradients::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param { id: pid, trainable: true } = node.op {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                g.ensure_finite(&format!("gradient of '{}'", node.label))?;
                match out.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.insert(pid, g);
                    }
                }
            }
        }
        Ok(out)
    }
}
