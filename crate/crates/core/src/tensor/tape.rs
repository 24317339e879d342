//! Wengert-list tape. Nodes are appended in evaluation order, so reverse
//! insertion order is a valid backward order.

use super::ops::{self, ConvGeometry};
use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag recorded for each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    MaxPool2d,
    Flatten,
    Linear,
    SoftmaxCrossEntropy,
    Select,
    Sum,
    Scale,
    Add,
}

/// How ReLU nodes propagate gradients during [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    /// Gradient passes where the forward input was positive.
    #[default]
    Standard,
    /// Gradient passes only where the forward input and the incoming
    /// gradient are both positive.
    Guided,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Flatten {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<T>,
    },
    Select {
        input: NodeId,
        index: usize,
    },
    Sum {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Flatten { .. } => OpKind::Flatten,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Select { .. } => OpKind::Select,
            Op::Sum { .. } => OpKind::Sum,
            Op::Scale { .. } => OpKind::Scale,
            Op::Add { .. } => OpKind::Add,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geometry = ops::conv_geometry(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let (out, cols) = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &geometry,
        );
        let rg = self.any_grad(&[input, weight, bias]);
        // Patches are only needed for the weight gradient.
        let cols = if self.requires_grad(weight) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool_forward(self.value(input), kernel, stride)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let out = v
            .clone()
            .reshape([v.numel()])
            .expect("flatten preserves numel");
        let rg = self.requires_grad(input);
        self.push(out, Op::Flatten { input }, rg)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_xent_forward(self.value(logits), label)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Picks one element (e.g. the class score `y_c`) as a scalar node.
    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(input);
        if index >= v.numel() {
            return Err(TensorError::dim(
                "select",
                "index",
                format!("{index} out of {} elements", v.numel()),
            ));
        }
        let out = Tensor::scalar(v.data()[index]);
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Select { input, index }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::dim(
                "add",
                "all",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Add { lhs, rhs }, rg))
    }

    /// Reverse sweep from a scalar node. Gradients are returned for every
    /// node that requires them, intermediate feature maps included.
    pub fn backward(&self, loss: NodeId, mode: BackwardMode) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &upstream, mode, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        upstream: &Tensor<T>,
        mode: BackwardMode,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut accumulate = |id: NodeId, data: Vec<T>| {
            let target = &self.nodes[id.0];
            if !target.requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot =
                        Some(Tensor::new(target.value.shape().to_vec(), data).expect("grad shape"));
                }
            }
        };
        let up = upstream.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            } => {
                let need = [
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    self.requires_grad(*bias),
                ];
                let g = ops::conv2d_backward(up, cols, self.value(*weight).data(), geometry, need);
                if let Some(d) = g.input {
                    accumulate(*input, d);
                }
                if let Some(d) = g.weight {
                    accumulate(*weight, d);
                }
                if let Some(d) = g.bias {
                    accumulate(*bias, d);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(up)
                    .map(|(&xi, &gi)| {
                        let open = match mode {
                            BackwardMode::Standard => xi > T::zero(),
                            BackwardMode::Guided => xi > T::zero() && gi > T::zero(),
                        };
                        if open {
                            gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(*input, d);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&src, &g) in argmax.iter().zip(up) {
                    d[src] += g;
                }
                accumulate(*input, d);
            }
            Op::Flatten { input } => accumulate(*input, up.to_vec()),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                if self.requires_grad(*input) {
                    let mut d = vec![T::zero(); n];
                    ops::matmul_into(n, m, 1, w.data(), true, up, false, T::zero(), &mut d);
                    accumulate(*input, d);
                }
                if self.requires_grad(*weight) {
                    let mut d = Vec::with_capacity(m * n);
                    for &gi in up {
                        d.extend(x.iter().map(|&xj| gi * xj));
                    }
                    accumulate(*weight, d);
                }
                accumulate(*bias, up.to_vec());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let scale = up[0];
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let target = if i == *label { T::one() } else { T::zero() };
                        (p - target) * scale
                    })
                    .collect();
                accumulate(*logits, d);
            }
            Op::Select { input, index } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                d[*index] = up[0];
                accumulate(*input, d);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                accumulate(*input, vec![up[0]; n]);
            }
            Op::Scale { input, factor } => {
                accumulate(*input, up.iter().map(|&g| g * *factor).collect())
            }
            Op::Add { lhs, rhs } => {
                accumulate(*lhs, up.to_vec());
                accumulate(*rhs, up.to_vec());
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing flowed there.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
