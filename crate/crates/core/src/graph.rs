//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operator call evaluates immediately and appends a node; node inputs
//! therefore always precede the node itself, and [`Graph::backward`] can walk
//! the node list in reverse.

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    Conv2d { input: NodeId, weights: NodeId, bias: Option<NodeId>, spec: ConvSpec },
    Relu(NodeId),
    ScaledTanh { input: NodeId, lo: f32, hi: f32 },
    UpsampleNearest { input: NodeId, factor: usize },
    ReplicateChannels { input: NodeId },
    MaxPool2(NodeId),
    ChannelAffine { input: NodeId, scale: f32 },
    SqDistance { a: NodeId, b: NodeId },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient slots produced by [`Graph::backward`], one per node.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if the node lies on a
    /// differentiable path from a parameter.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(Option::take)
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Parameter, value, true)
    }

    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let value = ops::conv2d(self.value(input), self.value(weights), bias.map(|b| self.value(b)), spec)?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        let rg = self.needs_grad(&deps);
        Ok(self.push(Op::Conv2d { input, weights, bias, spec }, value, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let rg = self.needs_grad(&[input]);
        self.push(Op::Relu(input), value, rg)
    }

    pub fn scaled_tanh(&mut self, input: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        let value = ops::scaled_tanh(self.value(input), lo, hi)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::ScaledTanh { input, lo, hi }, value, rg))
    }

    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::upsample_nearest(self.value(input), factor)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::UpsampleNearest { input, factor }, value, rg))
    }

    /// Stacks a single-channel map into three identical channels.
    pub fn replicate3(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::replicate_channels(self.value(input), 3)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::ReplicateChannels { input }, value, rg))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::max_pool2(self.value(input))?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::MaxPool2(input), value, rg))
    }

    /// `v * scale + shift[c]`; the shift is a constant, not a parameter.
    pub fn channel_affine(&mut self, input: NodeId, scale: f32, shift: &[f32]) -> Result<NodeId> {
        let value = ops::channel_affine(self.value(input), scale, shift)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Op::ChannelAffine { input, scale }, value, rg))
    }

    pub fn normalized_sq_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = ops::normalized_sq_distance(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::SqDistance { a, b }, Tensor::scalar(d), rg))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("sum of zero terms".into()));
        }
        let mut total = 0.0f64;
        for &t in terms {
            let v = self.value(t);
            if v.shape() != Shape::scalar() {
                return Err(Error::Shape(format!("sum expects scalar terms, got {}", v.shape())));
            }
            total += v.item() as f64;
        }
        let rg = self.needs_grad(terms);
        Ok(self.push(Op::Sum(terms.to_vec()), Tensor::scalar(total as f32), rg))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != Shape::scalar() {
            return Err(Error::Shape(format!("backward needs a scalar loss node, got {shape}")));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = slots[idx].clone() else { continue };
            match &node.op {
                Op::Constant | Op::Parameter => {}
                Op::Conv2d { input, weights, bias, spec } => {
                    let g = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weights),
                        *spec,
                        &grad,
                        self.requires_grad(*input),
                        self.requires_grad(*weights),
                        bias.is_some_and(|b| self.requires_grad(b)),
                    )?;
                    accumulate(&mut slots, *input, g.input);
                    accumulate(&mut slots, *weights, g.weights);
                    if let Some(b) = bias {
                        let gb = g.bias.map(|t| t.reshape(self.value(*b).shape())).transpose()?;
                        accumulate(&mut slots, *b, gb);
                    }
                }
                Op::Relu(input) => {
                    let g = ops::relu_backward(self.value(*input), &grad);
                    accumulate(&mut slots, *input, Some(g));
                }
                Op::ScaledTanh { input, lo, hi } => {
                    let g = ops::scaled_tanh_backward(self.value(*input), *lo, *hi, &grad)?;
                    accumulate(&mut slots, *input, Some(g));
                }
                Op::UpsampleNearest { input, factor } => {
                    let g = ops::upsample_nearest_backward(self.value(*input).shape(), *factor, &grad);
                    accumulate(&mut slots, *input, Some(g));
                }
                Op::ReplicateChannels { input } => {
                    let g = ops::replicate_channels_backward(self.value(*input).shape(), &grad);
                    accumulate(&mut slots, *input, Some(g));
                }
                Op::MaxPool2(input) => {
                    let g = ops::max_pool2_backward(self.value(*input), &grad);
                    accumulate(&mut slots, *input, Some(g));
                }
                Op::ChannelAffine { input, scale } => {
                    let s = *scale;
                    accumulate(&mut slots, *input, Some(grad.map(|g| g * s)));
                }
                Op::SqDistance { a, b } => {
                    let (ga, gb) = ops::normalized_sq_distance_backward(self.value(*a), self.value(*b), grad.item());
                    accumulate(&mut slots, *a, Some(ga));
                    accumulate(&mut slots, *b, Some(gb));
                }
                Op::Sum(terms) => {
                    for t in terms {
                        accumulate(&mut slots, *t, Some(grad.clone()));
                    }
                }
            }
            if !matches!(node.op, Op::Parameter) {
                slots[idx] = None;
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                slots[idx] = None;
            } else if matches!(node.op, Op::Parameter) && slots[idx].is_none() && idx <= loss.0 {
                // Unreachable parameters still get a zero gradient of their own shape.
                slots[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { slots })
    }
}

fn accumulate(slots: &mut [Option<Tensor>], id: NodeId, grad: Option<Tensor>) {
    let Some(grad) = grad else { return };
    match &mut slots[id.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(grad.data()).for_each(|(a, g)| *a += g),
        slot @ None => *slot = Some(grad),
    }
}
