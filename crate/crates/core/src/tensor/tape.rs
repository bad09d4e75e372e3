//! Reverse-mode tape.
//!
//! Every differentiable op appends one node holding its output value and a
//! record of where its inputs live, so the node list is already in
//! topological order. `backward` walks it once in reverse, accumulating
//! gradients across fan-out, and fills the gradient buffer of every node
//! whose value requires one. A tape belongs to one logical execution
//! context; run independent tapes for parallel work.

use super::ops;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::PrngState;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Loss reduction over the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        dims: ops::ConvDims,
    },
    MaxPool2d {
        input: ValueId,
        k: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    Dense {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        n: usize,
        d: usize,
        k: usize,
    },
    Relu {
        input: ValueId,
    },
    ConcatChannels {
        a: ValueId,
        b: ValueId,
        c1: usize,
        c2: usize,
    },
    GlobalAvgPool {
        input: ValueId,
        plane: usize,
    },
    Dropout {
        input: ValueId,
        mask: Vec<E>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    SpatialSoftmax {
        input: ValueId,
        plane: usize,
    },
    SumChannels {
        input: ValueId,
        k: usize,
        plane: usize,
    },
    MulChannelBroadcast {
        features: ValueId,
        alpha: ValueId,
        c: usize,
        plane: usize,
    },
    ScaleByScalar {
        input: ValueId,
        scalar: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        weights: Option<Vec<E>>,
        probs: Vec<E>,
        reduction: Reduction,
        k: usize,
    },
    PadReplicate {
        input: ValueId,
        pad: usize,
    },
    Pick {
        input: ValueId,
        index: usize,
    },
    Sum {
        input: ValueId,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    /// True when this node's value participates in some gradient path.
    on_grad_path: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, value: Tensor<E>) -> ValueId {
        let on_grad_path = value.requires_grad();
        self.push(value, Op::Leaf, on_grad_path)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call w.r.t. the node's value.
    pub fn grad(&self, id: ValueId) -> Option<&[E]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, mut value: Tensor<E>, op: Op<E>, on_grad_path: bool) -> ValueId {
        value.set_requires_grad(on_grad_path);
        self.nodes.push(Node {
            value,
            op,
            on_grad_path,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].on_grad_path
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let dims = ops::conv2d_check(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &dims,
        );
        let on_path =
            self.needs(input) || self.needs(kernel) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            on_path,
        ))
    }

    pub fn maxpool2d(&mut self, input: ValueId, k: usize, stride: usize) -> Result<ValueId> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input), k, stride)?;
        let on_path = self.needs(input);
        Ok(self.push(
            out,
            Op::MaxPool2d {
                input,
                k,
                stride,
                argmax,
            },
            on_path,
        ))
    }

    pub fn dense(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let (n, d, k) = ops::dense_check(self.value(input), self.value(weight), self.value(bias))?;
        let out = ops::dense_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            n,
            d,
            k,
        );
        let on_path = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d,
                k,
            },
            on_path,
        ))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu_forward(self.value(input));
        let on_path = self.needs(input);
        self.push(out, Op::Relu { input }, on_path)
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (n, c1, c2, h, w) = ops::concat_check(self.value(a), self.value(b))?;
        let out = ops::concat_forward(self.value(a), self.value(b), n, c1, c2, h, w);
        let on_path = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatChannels { a, b, c1, c2 }, on_path))
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let (_, _, h, w) = self.value(input).dims4("global_avg_pool")?;
        let out = ops::global_avg_pool_forward(self.value(input))?;
        let on_path = self.needs(input);
        Ok(self.push(
            out,
            Op::GlobalAvgPool {
                input,
                plane: h * w,
            },
            on_path,
        ))
    }

    /// Inverted dropout. Outside training (or at `p == 0`) this is the
    /// identity and records nothing.
    pub fn dropout(
        &mut self,
        input: ValueId,
        p: f64,
        rng: &mut PrngState,
        training: bool,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("probability {p} outside [0, 1)"),
            ));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let mask: Vec<E> = ops::dropout_mask(self.value(input).len(), p, rng);
        let data: Vec<E> = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_vec(self.value(input).shape(), data)?;
        let on_path = self.needs(input);
        Ok(self.push(out, Op::Dropout { input, mask }, on_path))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                axis: "elements",
                expected: self.value(a).len(),
                got: self.value(b).len(),
            });
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let on_path = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, on_path))
    }

    /// Same-shape elementwise product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                axis: "elements",
                expected: self.value(a).len(),
                got: self.value(b).len(),
            });
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let on_path = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, on_path))
    }

    pub fn spatial_softmax(&mut self, input: ValueId) -> Result<ValueId> {
        let (_, _, h, w) = self.value(input).dims4("spatial_softmax")?;
        let out = ops::spatial_softmax_forward(self.value(input))?;
        let on_path = self.needs(input);
        Ok(self.push(
            out,
            Op::SpatialSoftmax {
                input,
                plane: h * w,
            },
            on_path,
        ))
    }

    pub fn sum_channels(&mut self, input: ValueId) -> Result<ValueId> {
        let (_, k, h, w) = self.value(input).dims4("sum_channels")?;
        let out = ops::sum_channels_forward(self.value(input))?;
        let on_path = self.needs(input);
        Ok(self.push(
            out,
            Op::SumChannels {
                input,
                k,
                plane: h * w,
            },
            on_path,
        ))
    }

    pub fn mul_channel_broadcast(&mut self, features: ValueId, alpha: ValueId) -> Result<ValueId> {
        let (n, c, h, w) =
            ops::mul_channel_broadcast_check(self.value(features), self.value(alpha))?;
        let out = ops::mul_channel_broadcast_forward(
            self.value(features),
            self.value(alpha),
            n,
            c,
            h * w,
        );
        let on_path = self.needs(features) || self.needs(alpha);
        Ok(self.push(
            out,
            Op::MulChannelBroadcast {
                features,
                alpha,
                c,
                plane: h * w,
            },
            on_path,
        ))
    }

    pub fn scale_by_scalar(&mut self, input: ValueId, scalar: ValueId) -> Result<ValueId> {
        if !self.value(scalar).is_scalar() {
            return Err(Error::invalid("scale_by_scalar", "scale must be a scalar"));
        }
        let s = self.value(scalar).data()[0];
        let data: Vec<E> = self.value(input).data().iter().map(|&v| v * s).collect();
        let out = Tensor::from_vec(self.value(input).shape(), data)?;
        let on_path = self.needs(input) || self.needs(scalar);
        Ok(self.push(out, Op::ScaleByScalar { input, scalar }, on_path))
    }

    /// Stable softmax + cross-entropy. Returns the scalar loss node and a
    /// detached copy of the per-row probabilities. `class_weights`, when
    /// given, weight each sample by its true class; the loss is the
    /// (weighted) mean or sum of `-log p[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        class_weights: Option<&[E]>,
        reduction: Reduction,
    ) -> Result<(ValueId, Tensor<E>)> {
        let (n, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    axis: "class_weights",
                    expected: k,
                    got: w.len(),
                });
            }
        }
        let per_row = ops::per_row_ce(self.value(logits), labels)?;
        let probs = ops::softmax_probs(self.value(logits).data(), n, k);

        let mut total = E::ZERO;
        for (i, &l) in per_row.iter().enumerate() {
            let w = class_weights.map(|w| w[labels[i]]).unwrap_or(E::ONE);
            total += l * w;
        }
        if matches!(reduction, Reduction::Mean) {
            total /= E::from_f64(n as f64);
        }

        let probs_tensor = Tensor::from_vec(&[n, k], probs.clone())?;
        let on_path = self.needs(logits);
        let loss = self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.map(|w| w.to_vec()),
                probs,
                reduction,
                k,
            },
            on_path,
        );
        Ok((loss, probs_tensor))
    }

    /// Border-replicating spatial pad.
    pub fn pad_replicate(&mut self, input: ValueId, pad: usize) -> Result<ValueId> {
        if pad == 0 {
            return Ok(input);
        }
        let out = ops::pad_replicate_forward(self.value(input), pad)?;
        let on_path = self.needs(input);
        Ok(self.push(out, Op::PadReplicate { input, pad }, on_path))
    }

    /// Selects one element as a scalar (row-major flat index).
    pub fn pick(&mut self, input: ValueId, index: usize) -> Result<ValueId> {
        let len = self.value(input).len();
        if index >= len {
            return Err(Error::invalid(
                "pick",
                format!("index {index} out of range for {len} elements"),
            ));
        }
        let v = self.value(input).data()[index];
        let on_path = self.needs(input);
        Ok(self.push(Tensor::scalar(v), Op::Pick { input, index }, on_path))
    }

    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let mut acc = E::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        let on_path = self.needs(input);
        self.push(Tensor::scalar(acc), Op::Sum { input }, on_path)
    }

    /// Smallest distance of any recorded ReLU input from zero, or any
    /// maxpool window's top-two gap. Finite-difference harnesses use this
    /// to confirm a probe point is safely away from the kinks.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.0].value.data() {
                        margin = margin.min(v.to_f64().abs());
                    }
                }
                Op::MaxPool2d {
                    input, k, stride, ..
                } => {
                    let value = &self.nodes[input.0].value;
                    let Ok((n, c, h, w)) = value.dims4("margin") else {
                        continue;
                    };
                    if *k < 2 {
                        continue;
                    }
                    let oh = (h - k) / stride + 1;
                    let ow = (w - k) / stride + 1;
                    for ni in 0..n {
                        for ci in 0..c {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let mut top = f64::NEG_INFINITY;
                                    let mut second = f64::NEG_INFINITY;
                                    for ki in 0..*k {
                                        for kj in 0..*k {
                                            let v = value.data()[super::idx4(
                                                c,
                                                h,
                                                w,
                                                ni,
                                                ci,
                                                oi * stride + ki,
                                                oj * stride + kj,
                                            )]
                                            .to_f64();
                                            if v > top {
                                                second = top;
                                                top = v;
                                            } else if v > second {
                                                second = v;
                                            }
                                        }
                                    }
                                    margin = margin.min(top - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar node. Gradients accumulate (sum) across
    /// fan-out; every node with `requires_grad` gets a buffer, zero-filled
    /// when it is off the loss path.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarBackward {
                elements: self.nodes[loss.0].value.len(),
            });
        }

        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].on_grad_path {
                continue;
            }
            self.dispatch(i, &grad_out, &mut grads)?;
            // stash the output gradient on the node itself
            self.nodes[i].value.set_grad(Some(grad_out));
        }

        // zero-fill grads for requires-grad nodes the loss never reached
        for node in &mut self.nodes {
            if node.on_grad_path && node.value.grad().is_none() {
                let len = node.value.len();
                node.value.set_grad(Some(vec![E::ZERO; len]));
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, i: usize, grad_out: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let (input, kernel, bias, dims) = (*input, *kernel, *bias, *dims);
                let parts = ops::conv2d_backward(
                    grad_out,
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    &dims,
                    self.needs(input),
                    self.needs(kernel),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                );
                if let Some(g) = parts.input {
                    accumulate(grads, input, g);
                }
                if let Some(g) = parts.kernel {
                    accumulate(grads, kernel, g);
                }
                if let (Some(b), Some(g)) = (bias, parts.bias) {
                    accumulate(grads, b, g);
                }
            }
            Op::MaxPool2d { input, argmax, .. } => {
                let input = *input;
                if self.needs(input) {
                    let g =
                        ops::maxpool2d_backward(grad_out, argmax, self.nodes[input.0].value.len());
                    accumulate(grads, input, g);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d,
                k,
            } => {
                let (input, weight, bias, n, d, k) = (*input, *weight, *bias, *n, *d, *k);
                let parts = ops::dense_backward(
                    grad_out,
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    n,
                    d,
                    k,
                    self.needs(input),
                    self.needs(weight),
                    self.needs(bias),
                );
                if let Some(g) = parts.input {
                    accumulate(grads, input, g);
                }
                if let Some(g) = parts.weight {
                    accumulate(grads, weight, g);
                }
                if let Some(g) = parts.bias {
                    accumulate(grads, bias, g);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.needs(input) {
                    let g = ops::relu_backward(grad_out, self.nodes[input.0].value.data());
                    accumulate(grads, input, g);
                }
            }
            Op::ConcatChannels { a, b, c1, c2 } => {
                let (a, b, c1, c2) = (*a, *b, *c1, *c2);
                let (n, _, h, w) = node.value.dims4("concat_channels")?;
                let (ga, gb) = ops::concat_backward(grad_out, n, c1, c2, h * w);
                if self.needs(a) {
                    accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    accumulate(grads, b, gb);
                }
            }
            Op::GlobalAvgPool { input, plane } => {
                let (input, plane) = (*input, *plane);
                if self.needs(input) {
                    let (n, c) = node.value.dims2("global_avg_pool")?;
                    let g = ops::global_avg_pool_backward(grad_out, n, c, plane);
                    accumulate(grads, input, g);
                }
            }
            Op::Dropout { input, mask } => {
                let input = *input;
                if self.needs(input) {
                    let g: Vec<E> = grad_out.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    accumulate(grads, input, g);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accumulate(grads, a, grad_out.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, grad_out.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let g: Vec<E> = grad_out
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    accumulate(grads, a, g);
                }
                if self.needs(b) {
                    let g: Vec<E> = grad_out
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    accumulate(grads, b, g);
                }
            }
            Op::SpatialSoftmax { input, plane } => {
                let (input, plane) = (*input, *plane);
                if self.needs(input) {
                    let g = ops::spatial_softmax_backward(grad_out, node.value.data(), plane);
                    accumulate(grads, input, g);
                }
            }
            Op::SumChannels { input, k, plane } => {
                let (input, k, plane) = (*input, *k, *plane);
                if self.needs(input) {
                    let n = node.value.shape()[0];
                    let g = ops::sum_channels_backward(grad_out, n, k, plane);
                    accumulate(grads, input, g);
                }
            }
            Op::MulChannelBroadcast {
                features,
                alpha,
                c,
                plane,
            } => {
                let (features, alpha, c, plane) = (*features, *alpha, *c, *plane);
                let n = self.nodes[features.0].value.shape()[0];
                let (gf, ga) = ops::mul_channel_broadcast_backward(
                    grad_out,
                    &self.nodes[features.0].value,
                    &self.nodes[alpha.0].value,
                    n,
                    c,
                    plane,
                    self.needs(features),
                    self.needs(alpha),
                );
                if let Some(g) = gf {
                    accumulate(grads, features, g);
                }
                if let Some(g) = ga {
                    accumulate(grads, alpha, g);
                }
            }
            Op::ScaleByScalar { input, scalar } => {
                let (input, scalar) = (*input, *scalar);
                let s = self.nodes[scalar.0].value.data()[0];
                if self.needs(input) {
                    let g: Vec<E> = grad_out.iter().map(|&g| g * s).collect();
                    accumulate(grads, input, g);
                }
                if self.needs(scalar) {
                    let mut acc = E::ZERO;
                    for (&g, &x) in grad_out.iter().zip(self.nodes[input.0].value.data()) {
                        acc += g * x;
                    }
                    accumulate(grads, scalar, vec![acc]);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
                probs,
                reduction,
                k,
            } => {
                let (logits_id, k) = (*logits, *k);
                if self.needs(logits_id) {
                    let go = grad_out[0];
                    let n = labels.len();
                    let inv_n = match reduction {
                        Reduction::Mean => E::ONE / E::from_f64(n as f64),
                        Reduction::Sum => E::ONE,
                    };
                    let mut g = vec![E::ZERO; n * k];
                    for i in 0..n {
                        let w = weights.as_ref().map(|w| w[labels[i]]).unwrap_or(E::ONE);
                        let scale = go * w * inv_n;
                        for j in 0..k {
                            let y = if j == labels[i] { E::ONE } else { E::ZERO };
                            g[i * k + j] = scale * (probs[i * k + j] - y);
                        }
                    }
                    accumulate(grads, logits_id, g);
                }
            }
            Op::PadReplicate { input, pad } => {
                let (input, pad) = (*input, *pad);
                if self.needs(input) {
                    let (n, c, h, w) = self.nodes[input.0].value.dims4("pad_replicate")?;
                    let g = ops::pad_replicate_backward(grad_out, n, c, h, w, pad);
                    accumulate(grads, input, g);
                }
            }
            Op::Pick { input, index } => {
                let (input, index) = (*input, *index);
                if self.needs(input) {
                    let mut g = vec![E::ZERO; self.nodes[input.0].value.len()];
                    g[index] = grad_out[0];
                    accumulate(grads, input, g);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.needs(input) {
                    let g = vec![grad_out[0]; self.nodes[input.0].value.len()];
                    accumulate(grads, input, g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], id: ValueId, contribution: Vec<E>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += *c;
            }
        }
        slot => *slot = Some(contribution),
    }
}
