//! Layer-granularity reverse-mode autodiff.
//!
//! A [`Tape`] records each layer call as one node holding its output value and
//! whatever the backward pass needs (unfolded patches, argmax routes, softmax
//! probabilities). Nodes are appended in evaluation order, so a reverse sweep
//! over the node list is a valid topological order.

use crate::detection::{self, BBox};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        col: Vec<f64>,
        geom: ConvGeometry,
    },
    FullyConnected {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    RoiPool {
        input: NodeId,
        argmax: Vec<Option<usize>>,
    },
    /// Forward max over the batch axis; backward deposits zeros.
    BatchPool {
        input: NodeId,
    },
    ChannelConcat {
        inputs: Vec<NodeId>,
    },
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    Reshape {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Vec<f64>,
    },
    LinearCombination {
        inputs: Vec<NodeId>,
        coeffs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_rois: usize,
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

    /// Adds an input; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn variable(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient deposited by the last [`Tape::backward`], if the node was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// RoIs clamped to a single map cell so far.
    pub fn degenerate_rois(&self) -> usize {
        self.degenerate_rois
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (out, col, geom) = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let rg = self.any_grad(&[input, weight, bias]);
        // the patch matrix is only needed for weight/input gradients
        let col = if rg { col } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                col,
                geom,
            },
            rg,
        ))
    }

    pub fn fully_connected(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let out = ops::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn max_pool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = ops::max_pool2d_forward(self.value(input), k, stride)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// Mean cross-entropy over labelled rows of `[K]` or `[N,K]` logits.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[Option<usize>],
    ) -> Result<NodeId> {
        let (loss, probs, count) = ops::softmax_cross_entropy_forward(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Pools each RoI of a `[C,H,W]` map into `[N,C,out_h,out_w]`.
    pub fn roi_pool(
        &mut self,
        feature_map: NodeId,
        rois: &[BBox],
        spatial_scale: f64,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let pooled =
            detection::roi_pool_many(self.value(feature_map), rois, spatial_scale, out_h, out_w)?;
        self.degenerate_rois += pooled.degenerate;
        let rg = self.any_grad(&[feature_map]);
        Ok(self.push(
            pooled.output,
            Op::RoiPool {
                input: feature_map,
                argmax: pooled.argmax,
            },
            rg,
        ))
    }

    /// Elementwise max over the leading axis of `[N,C,h,w]`, giving `[C,h,w]`.
    /// Gradients stop here: every input position receives exactly zero.
    pub fn batch_pool(&mut self, maps: NodeId) -> Result<NodeId> {
        let out = detection::batch_pool_stacked(self.value(maps))?;
        let rg = self.any_grad(&[maps]);
        Ok(self.push(out, Op::BatchPool { input: maps }, rg))
    }

    /// Stacks maps along the channel axis (axis 0 for `[C,h,w]`, axis 1 for
    /// `[N,C,h,w]`) in argument order.
    pub fn channel_concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
        let out = detection::channel_concat(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::ChannelConcat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Selects entries along the leading axis.
    pub fn gather(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let src = self.value(input);
        let Some((&n, rest)) = src.shape().split_first() else {
            return Err(Error::shape("gather", "cannot gather from a scalar"));
        };
        let stride: usize = rest.iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(
                    "gather",
                    format!("index {} out of range for leading axis {}", i, n),
                ));
            }
            data.extend_from_slice(&src.data()[i * stride..][..stride]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(rest);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            out,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Scalar `sum_i weights[i] * input[i]`.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &[f64]) -> Result<NodeId> {
        let x = self.value(input);
        if x.numel() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.numel()),
            ));
        }
        let s = x.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let ones = vec![1.0; self.value(input).numel()];
        self.weighted_sum(input, &ones)
    }

    /// Scalar `sum_i coeffs[i] * inputs[i]` over single-element nodes.
    pub fn linear_combination(&mut self, inputs: &[NodeId], coeffs: &[f64]) -> Result<NodeId> {
        if inputs.len() != coeffs.len() {
            return Err(Error::shape(
                "linear_combination",
                format!("{} coefficients for {} terms", coeffs.len(), inputs.len()),
            ));
        }
        let mut s = 0.0;
        for (&id, c) in inputs.iter().zip(coeffs) {
            let v = self.value(id);
            if v.numel() != 1 {
                return Err(Error::shape(
                    "linear_combination",
                    format!("term has shape {:?}, expected a scalar", v.shape()),
                ));
            }
            s += c * v.item();
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::scalar(s),
            Op::LinearCombination {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node. Gradients land in each reached
    /// node's grad slot (see [`Tape::grad`]); earlier gradients are cleared.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut deposit = |target: NodeId, delta: Vec<f64>| {
                if !self.nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    col,
                    geom,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let w = self.nodes[weight.0].value.data();
                    let cg = ops::conv2d_backward(geom, col, w, &g, need_input);
                    if let Some(dx) = cg.input {
                        deposit(*input, dx);
                    }
                    deposit(*weight, cg.weight);
                    deposit(*bias, cg.bias);
                }
                Op::FullyConnected {
                    input,
                    weight,
                    bias,
                } => {
                    let (dx, dw, db) = ops::fully_connected_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                    );
                    deposit(*input, dx);
                    deposit(*weight, dw);
                    deposit(*bias, db);
                }
                Op::Relu { input } => {
                    let dx = ops::relu_backward(self.nodes[input.0].value.data(), &g);
                    deposit(*input, dx);
                }
                Op::MaxPool2d { input, argmax } => {
                    let n = self.nodes[input.0].value.numel();
                    deposit(
                        *input,
                        ops::scatter_argmax(n, argmax.iter().map(|&i| Some(i)), &g),
                    );
                }
                Op::GlobalAvgPool { input } => {
                    let dx = ops::global_avg_pool_backward(self.nodes[input.0].value.shape(), &g);
                    deposit(*input, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    count,
                } => {
                    let dx = ops::softmax_cross_entropy_backward(probs, labels, *count, g[0]);
                    deposit(*logits, dx);
                }
                Op::RoiPool { input, argmax } => {
                    let n = self.nodes[input.0].value.numel();
                    deposit(*input, ops::scatter_argmax(n, argmax.iter().copied(), &g));
                }
                Op::BatchPool { input } => {
                    let n = self.nodes[input.0].value.numel();
                    deposit(*input, vec![0.0; n]);
                }
                Op::ChannelConcat { inputs } => {
                    let shapes: Vec<&[usize]> = inputs
                        .iter()
                        .map(|i| self.nodes[i.0].value.shape())
                        .collect();
                    let parts = detection::split_channels(&g, &shapes);
                    for (&id, part) in inputs.iter().zip(parts) {
                        deposit(id, part);
                    }
                }
                Op::Gather { input, indices } => {
                    let src = &self.nodes[input.0].value;
                    let stride = src.numel() / src.shape()[0].max(1);
                    let mut dx = vec![0.0; src.numel()];
                    for (row, &i) in indices.iter().enumerate() {
                        for (d, s) in dx[i * stride..][..stride]
                            .iter_mut()
                            .zip(&g[row * stride..][..stride])
                        {
                            *d += s;
                        }
                    }
                    deposit(*input, dx);
                }
                Op::Reshape { input } => deposit(*input, g.clone()),
                Op::WeightedSum { input, weights } => {
                    deposit(*input, weights.iter().map(|w| w * g[0]).collect());
                }
                Op::LinearCombination { inputs, coeffs } => {
                    for (&id, c) in inputs.iter().zip(coeffs) {
                        deposit(id, vec![c * g[0]]);
                    }
                }
            }
            self.nodes[id].value.set_grad(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.variable(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let b = tape.variable(Tensor::zeros(&[1]));
        let y = tape.fully_connected(x, w, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![3.0]));
        let a = tape.weighted_sum(x, &[2.0]).unwrap();
        let b = tape.weighted_sum(x, &[5.0]).unwrap();
        let loss = tape.linear_combination(&[a, b], &[1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn batch_pool_blocks_gradient() {
        let mut tape = Tape::new();
        let maps = tape.variable(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let pooled = tape.batch_pool(maps).unwrap();
        assert_eq!(tape.value(pooled).data(), &[3.0, 5.0]);
        let loss = tape.sum(pooled).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(maps).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let g = tape.gather(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
        let loss = tape.sum(g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 0., 0., 2., 2.]);
        assert!(tape.gather(x, &[3]).is_err());
    }
}
