//! Reverse-mode autodiff over the kernel set in [`crate::ops`].
//!
//! A `Tape` records one forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! into every node that requires them. Tapes are single-use per forward pass.

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::norm::BnSaved;
use crate::tensor::{ConvSpec, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    MulBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    AdaptiveAvgPool {
        input: NodeId,
    },
    BilinearResize {
        input: NodeId,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    SliceBatch {
        input: NodeId,
        index: usize,
    },
    ConcatBatch {
        inputs: Vec<NodeId>,
    },
    Reshape {
        input: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        input: NodeId,
    },
    SoftmaxRows {
        input: NodeId,
    },
    AddIdentity {
        input: NodeId,
    },
    RowSum {
        input: NodeId,
    },
    Rsqrt {
        input: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
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

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Insert an input or parameter value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let bias_vec = bias.map(|b| self.value(b).data().to_vec());
        let value = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias_vec.as_deref(),
            &spec,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let needs = self.any_needs(&parents);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            needs,
        ))
    }

    /// Training-mode batch norm; updates the running statistics in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let (value, saved) = ops::batch_norm_train(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
            momentum,
        )?;
        let needs = self.any_needs(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            },
            needs,
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let value = ops::batch_norm_eval(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        )?;
        let needs = self.any_needs(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let needs = self.nodes[input.0].needs_grad;
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = ops::sigmoid(self.value(input));
        let needs = self.nodes[input.0].needs_grad;
        self.push(value, Op::Sigmoid { input }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::add(self.value(a), self.value(b))?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::mul_broadcast(self.value(a), self.value(b))?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::MulBroadcast { a, b }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = ops::scale(self.value(input), factor);
        let needs = self.nodes[input.0].needs_grad;
        self.push(value, Op::Scale { input, factor }, needs)
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.adaptive_avg_pool(input, 1, 1)
    }

    pub fn adaptive_avg_pool(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = ops::adaptive_avg_pool(self.value(input), out_h, out_w)?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::AdaptiveAvgPool { input }, needs))
    }

    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = ops::bilinear_resize(self.value(input), out_h, out_w)?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::BilinearResize { input }, needs))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidGeometry {
                context: "concat_channels",
                message: "no inputs".into(),
            });
        }
        let [n, _, h, w] = self.value(inputs[0]).shape();
        let mut c_total = 0;
        for id in inputs {
            let [ni, ci, hi, wi] = self.value(*id).shape();
            if ni != n || hi != h || wi != w {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels",
                    dimension: "batch/spatial dims",
                    expected: n * h * w,
                    found: ni * hi * wi,
                });
            }
            c_total += ci;
        }
        let mut out = Tensor::zeros([n, c_total, h, w]);
        let plane = h * w;
        {
            let dst = out.data_mut();
            let mut c_off = 0;
            for id in inputs {
                let t = &self.nodes[id.0].value;
                let ci = t.channels();
                let src = t.data();
                for img in 0..n {
                    for ch in 0..ci {
                        let s = (img * ci + ch) * plane;
                        let d = (img * c_total + c_off + ch) * plane;
                        dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
                    }
                }
                c_off += ci;
            }
        }
        let needs = self.any_needs(inputs);
        Ok(self.push(
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Extract batch element `index` as a (1,C,H,W) tensor.
    pub fn slice_batch(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(input);
        let [n, c, h, w] = t.shape();
        if index >= n {
            return Err(Error::ShapeMismatch {
                context: "slice_batch",
                dimension: "batch index",
                expected: n,
                found: index,
            });
        }
        let plane = c * h * w;
        let data = t.data()[index * plane..(index + 1) * plane].to_vec();
        let value = Tensor::from_vec([1, c, h, w], data)?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::SliceBatch { input, index }, needs))
    }

    /// Stack (1,C,H,W) tensors along the batch axis.
    pub fn concat_batch(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidGeometry {
                context: "concat_batch",
                message: "no inputs".into(),
            });
        }
        let [_, c, h, w] = self.value(inputs[0]).shape();
        let mut data = Vec::with_capacity(inputs.len() * c * h * w);
        for id in inputs {
            let t = self.value(*id);
            let [ni, ci, hi, wi] = t.shape();
            if ni != 1 || ci != c || hi != h || wi != w {
                return Err(Error::ShapeMismatch {
                    context: "concat_batch",
                    dimension: "element shape",
                    expected: c * h * w,
                    found: ni * ci * hi * wi,
                });
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec([inputs.len(), c, h, w], data)?;
        let needs = self.any_needs(inputs);
        Ok(self.push(
            value,
            Op::ConcatBatch {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: [usize; 4]) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::transpose(self.value(input))?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Transpose { input }, needs))
    }

    pub fn softmax_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::softmax_rows(self.value(input))?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::SoftmaxRows { input }, needs))
    }

    pub fn add_identity(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::add_identity(self.value(input))?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::AddIdentity { input }, needs))
    }

    pub fn row_sum(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::row_sum(self.value(input))?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::RowSum { input }, needs))
    }

    pub fn rsqrt(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::rsqrt(self.value(input))?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, Op::Rsqrt { input }, needs))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output value). Returns per-node gradients.
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch {
                context: "tape backward",
                dimension: "seed elements",
                expected: self.value(output).len(),
                found: seed.len(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (di, dw, db) =
                    ops::conv2d_backward(g, self.value(*input), self.value(*weight), spec)?;
                self.accumulate(grads, *input, di)?;
                self.accumulate(grads, *weight, dw)?;
                if let (Some(bias_id), Some(db)) = (bias, db) {
                    let db_t = Tensor::from_vec(self.value(*bias_id).shape(), db)?;
                    self.accumulate(grads, *bias_id, db_t)?;
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (di, dgamma, dbeta) = ops::batch_norm_train_backward(
                    g,
                    self.value(*input),
                    self.value(*gamma).data(),
                    saved,
                );
                self.accumulate(grads, *input, di)?;
                let gshape = self.value(*gamma).shape();
                self.accumulate(grads, *gamma, Tensor::from_vec(gshape, dgamma)?)?;
                let bshape = self.value(*beta).shape();
                self.accumulate(grads, *beta, Tensor::from_vec(bshape, dbeta)?)?;
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (di, dgamma, dbeta) = ops::batch_norm_eval_backward(
                    g,
                    self.value(*input),
                    self.value(*gamma).data(),
                    mean,
                    var,
                    *eps,
                );
                self.accumulate(grads, *input, di)?;
                let gshape = self.value(*gamma).shape();
                self.accumulate(grads, *gamma, Tensor::from_vec(gshape, dgamma)?)?;
                let bshape = self.value(*beta).shape();
                self.accumulate(grads, *beta, Tensor::from_vec(bshape, dbeta)?)?;
            }
            Op::Relu { input } => {
                let di = ops::relu_backward(g, self.value(*input));
                self.accumulate(grads, *input, di)?;
            }
            Op::Sigmoid { input } => {
                let di = ops::sigmoid_backward(g, &self.nodes[idx].value);
                self.accumulate(grads, *input, di)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::MulBroadcast { a, b } => {
                let (da, db) = ops::mul_broadcast_backward(g, self.value(*a), self.value(*b));
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale { input, factor } => {
                let mut di = g.clone();
                for v in di.data_mut() {
                    *v *= factor;
                }
                self.accumulate(grads, *input, di)?;
            }
            Op::AdaptiveAvgPool { input } => {
                let [_, _, h, w] = self.value(*input).shape();
                let di = ops::adaptive_avg_pool_backward(g, h, w);
                self.accumulate(grads, *input, di)?;
            }
            Op::BilinearResize { input } => {
                let [_, _, h, w] = self.value(*input).shape();
                let di = ops::bilinear_resize_backward(g, h, w);
                self.accumulate(grads, *input, di)?;
            }
            Op::ConcatChannels { inputs } => {
                let [n, _, h, w] = self.nodes[idx].value.shape();
                let plane = h * w;
                let c_total = self.nodes[idx].value.channels();
                let mut c_off = 0;
                for id in inputs {
                    let ci = self.value(*id).channels();
                    let mut di = Tensor::zeros([n, ci, h, w]);
                    {
                        let dst = di.data_mut();
                        let src = g.data();
                        for img in 0..n {
                            for ch in 0..ci {
                                let s = (img * c_total + c_off + ch) * plane;
                                let d = (img * ci + ch) * plane;
                                dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
                            }
                        }
                    }
                    self.accumulate(grads, *id, di)?;
                    c_off += ci;
                }
            }
            Op::SliceBatch { input, index } => {
                let shape = self.value(*input).shape();
                let [_, c, h, w] = shape;
                let plane = c * h * w;
                let mut di = Tensor::zeros(shape);
                di.data_mut()[index * plane..(index + 1) * plane].copy_from_slice(g.data());
                self.accumulate(grads, *input, di)?;
            }
            Op::ConcatBatch { inputs } => {
                let [_, c, h, w] = self.nodes[idx].value.shape();
                let plane = c * h * w;
                for (i, id) in inputs.iter().enumerate() {
                    let mut di = Tensor::zeros([1, c, h, w]);
                    di.data_mut()
                        .copy_from_slice(&g.data()[i * plane..(i + 1) * plane]);
                    self.accumulate(grads, *id, di)?;
                }
            }
            Op::Reshape { input } => {
                let di = g.reshaped(self.value(*input).shape())?;
                self.accumulate(grads, *input, di)?;
            }
            Op::MatMul { a, b } => {
                let (da, db) = ops::matmul_backward(g, self.value(*a), self.value(*b))?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Transpose { input } => {
                let di = ops::transpose(g)?;
                self.accumulate(grads, *input, di)?;
            }
            Op::SoftmaxRows { input } => {
                let di = ops::softmax_rows_backward(g, &self.nodes[idx].value);
                self.accumulate(grads, *input, di)?;
            }
            Op::AddIdentity { input } => {
                self.accumulate(grads, *input, g.clone())?;
            }
            Op::RowSum { input } => {
                let cols = self.value(*input).cols();
                let di = ops::row_sum_backward(g, cols);
                self.accumulate(grads, *input, di)?;
            }
            Op::Rsqrt { input } => {
                let di = ops::rsqrt_backward(g, self.value(*input));
                self.accumulate(grads, *input, di)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn add_and_scale_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 2], 3.0), true);
        let y = tape.leaf(Tensor::full([1, 1, 1, 2], 4.0), true);
        let s = tape.add(x, y).unwrap();
        let out = tape.scale(s, 2.5);
        let mut grads = tape
            .backward(out, Tensor::full([1, 1, 1, 2], 1.0))
            .unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[2.5, 2.5]);
        assert_eq!(grads.take(y).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn reuse_of_a_node_accumulates() {
        // f(x) = x + x  => df/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 1.5), true);
        let out = tape.add(x, x).unwrap();
        let mut grads = tape.backward(out, Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_chain_gradient_matches_hand_result() {
        // f = sum(A B), dA = 1 Bᵀ, dB = Aᵀ 1
        let mut rng = Rng::new(3);
        let a_val = Tensor::random([1, 1, 2, 3], -1.0, 1.0, &mut rng);
        let b_val = Tensor::random([1, 1, 3, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(a_val.clone(), true);
        let b = tape.leaf(b_val.clone(), true);
        let out = tape.matmul(a, b).unwrap();
        let mut grads = tape.backward(out, Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        let da = grads.take(a).unwrap();
        for i in 0..2 {
            for l in 0..3 {
                let want = b_val.m(l, 0) + b_val.m(l, 1);
                assert!((da.m(i, l) - want).abs() < 1e-12);
            }
        }
        let db = grads.take(b).unwrap();
        for l in 0..3 {
            for j in 0..2 {
                let want = a_val.m(0, l) + a_val.m(1, l);
                assert!((db.m(l, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slice_concat_round_trip_gradient() {
        let mut rng = Rng::new(5);
        let x_val = Tensor::random([3, 2, 2, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_val, true);
        let parts: Vec<NodeId> = (0..3).map(|i| tape.slice_batch(x, i).unwrap()).collect();
        let out = tape.concat_batch(&parts).unwrap();
        let seed = Tensor::full([3, 2, 2, 2], 1.0);
        let mut grads = tape.backward(out, seed).unwrap();
        assert!(grads.take(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn backward_rejects_bad_seed_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        let out = tape.relu(x);
        assert!(tape.backward(out, Tensor::zeros([1, 1, 3, 3])).is_err());
    }
}
