//! Reverse-mode gradient tape over the operator set.
//!
//! A `GradTape` records one forward pass as a linear sequence of nodes, then
//! replays it backward to produce gradients of a scalar loss with respect to
//! every recorded tensor. The tape is single-owner and single-use: a second
//! `backward` call is a contract violation.

use super::ops::{self, BnCache};
use super::{ConvParams, Padding, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Whether batch normalization uses batch statistics (training) or the
/// stored running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: (usize, usize),
        padding: Padding,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<usize>,
    },
    ChannelMax {
        x: VarId,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: VarId,
    },
    LeakyRelu {
        x: VarId,
        slope: f64,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        cache: Option<BnCache>,
        running: Option<(Tensor, Tensor)>,
    },
    Softmax {
        x: VarId,
    },
    CrossEntropy {
        probs: VarId,
        targets: Vec<usize>,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    WeightedSum {
        parts: Vec<VarId>,
        weights: Vec<f64>,
    },
    ConcatChannels {
        a: VarId,
        b: VarId,
        ca: usize,
        cb: usize,
    },
    PadSpatial {
        x: VarId,
        pad: Padding,
    },
    SliceRows {
        x: VarId,
        r0: usize,
    },
    UpsampleRows {
        x: VarId,
        factor: usize,
    },
    Reshape {
        x: VarId,
    },
    DotConst {
        x: VarId,
        coeffs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by `VarId`, produced by `GradTape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded tensor, if any path
    /// connected it to the loss.
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a parameter, materializing zeros when the parameter did
    /// not influence the loss.
    pub fn for_param(&self, v: VarId, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<VarId> {
        if self.consumed {
            return Err(Error::Contract(
                "gradient tape reused after backward() consumed it".into(),
            ));
        }
        self.nodes.push(Node { value, op });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Result<VarId> {
        self.push(t, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: (usize, usize), padding: Padding) -> Result<VarId> {
        let p = ConvParams::new(self.value(w).clone(), self.value(b).clone(), stride, padding)?;
        let out = ops::conv2d(self.value(x), &p)?;
        self.push(out, Op::Conv2d { x, w, b, stride, padding })
    }

    pub fn maxpool2d(&mut self, x: VarId, k: (usize, usize), s: (usize, usize)) -> Result<VarId> {
        let (out, argmax) = ops::maxpool2d(self.value(x), k, s)?;
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn channel_max(&mut self, x: VarId) -> Result<VarId> {
        let (out, argmax) = ops::channel_max(self.value(x))?;
        self.push(out, Op::ChannelMax { x, argmax })
    }

    pub fn adaptive_avg_pool(&mut self, x: VarId, out_h: usize, out_w: usize) -> Result<VarId> {
        let out = ops::adaptive_avg_pool(self.value(x), out_h, out_w)?;
        self.push(out, Op::AdaptiveAvgPool { x })
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> Result<VarId> {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu { x, slope })
    }

    /// Batch normalization. In `Train` mode the batch statistics are returned
    /// so the caller can fold them into the running statistics.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: Mode,
    ) -> Result<(VarId, Option<BnCache>)> {
        match mode {
            Mode::Train => {
                let (out, cache) = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
                let id = self.push(
                    out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        cache: Some(cache.clone()),
                        running: None,
                    },
                )?;
                Ok((id, Some(cache)))
            }
            Mode::Eval => {
                let out = ops::batch_norm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    running_mean,
                    running_var,
                )?;
                let id = self.push(
                    out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        cache: None,
                        running: Some((running_mean.clone(), running_var.clone())),
                    },
                )?;
                Ok((id, None))
            }
        }
    }

    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let out = ops::softmax(self.value(x))?;
        self.push(out, Op::Softmax { x })
    }

    pub fn cross_entropy(&mut self, probs: VarId, targets: &[usize]) -> Result<VarId> {
        let out = ops::cross_entropy(self.value(probs), targets)?;
        self.push(
            out,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add { a, b })
    }

    pub fn weighted_sum(&mut self, parts: &[VarId], weights: &[f64]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p.0].value).collect();
        let out = ops::weighted_sum(&tensors, weights)?;
        self.push(
            out,
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let ca = *self.value(a).shape().last().unwrap();
        let cb = *self.value(b).shape().last().unwrap();
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        self.push(out, Op::ConcatChannels { a, b, ca, cb })
    }

    pub fn pad_spatial(&mut self, x: VarId, pad: Padding) -> Result<VarId> {
        let out = ops::pad_spatial(self.value(x), pad)?;
        self.push(out, Op::PadSpatial { x, pad })
    }

    pub fn slice_rows(&mut self, x: VarId, r0: usize, r1: usize) -> Result<VarId> {
        let out = ops::slice_rows(self.value(x), r0, r1)?;
        self.push(out, Op::SliceRows { x, r0 })
    }

    pub fn upsample_rows(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        let out = ops::upsample_rows(self.value(x), factor)?;
        self.push(out, Op::UpsampleRows { x, factor })
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Scalar projection against constant coefficients; with all-ones
    /// coefficients this is the plain sum of elements.
    pub fn dot_const(&mut self, x: VarId, coeffs: Tensor) -> Result<VarId> {
        let out = ops::dot_const(self.value(x), &coeffs)?;
        self.push(out, Op::DotConst { x, coeffs })
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let ones = Tensor::filled(self.value(x).shape(), 1.0);
        self.dot_const(x, ones)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call is
    /// a contract violation.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "gradient tape reused after backward() consumed it".into(),
            ));
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stash the gradient so callers can inspect intermediates.
            let node_value_shape = self.nodes[i].value.shape().to_vec();
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    let p = ConvParams::new(
                        self.nodes[w.0].value.clone(),
                        self.nodes[b.0].value.clone(),
                        *stride,
                        *padding,
                    )?;
                    let (gx, gw, gb) = ops::conv2d_backward(&self.nodes[x.0].value, &p, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                    grads[i] = Some(g);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = ops::maxpool2d_backward(self.nodes[x.0].value.shape(), argmax, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::ChannelMax { x, argmax } => {
                    let gx = ops::channel_max_backward(self.nodes[x.0].value.shape(), argmax, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::AdaptiveAvgPool { x } => {
                    let gx = ops::adaptive_avg_pool_backward(self.nodes[x.0].value.shape(), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = ops::leaky_relu_backward(&self.nodes[x.0].value, *slope, &g);
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                    running,
                } => {
                    let (gx, dgamma, dbeta) = match (cache, running) {
                        (Some(c), _) => ops::batch_norm_train_backward(
                            &self.nodes[x.0].value,
                            &self.nodes[gamma.0].value,
                            c,
                            &g,
                        )?,
                        (None, Some((rm, rv))) => ops::batch_norm_eval_backward(
                            &self.nodes[x.0].value,
                            &self.nodes[gamma.0].value,
                            rm,
                            rv,
                            &g,
                        )?,
                        _ => unreachable!("batch norm records cache or running stats"),
                    };
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                    grads[i] = Some(g);
                }
                Op::Softmax { x } => {
                    let gx = ops::softmax_backward(&self.nodes[i].value, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::CrossEntropy { probs, targets } => {
                    let gp = ops::cross_entropy_backward(&self.nodes[probs.0].value, targets, g.item())?;
                    accumulate(&mut grads, *probs, gp)?;
                    grads[i] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) =
                        ops::linear_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                    grads[i] = Some(g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                    grads[i] = Some(g);
                }
                Op::WeightedSum { parts, weights } => {
                    for (&p, &w) in parts.iter().zip(weights) {
                        accumulate(&mut grads, p, g.map(|v| v * w))?;
                    }
                    grads[i] = Some(g);
                }
                Op::ConcatChannels { a, b, ca, cb } => {
                    let (ga, gb) = ops::concat_channels_backward(*ca, *cb, &g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                    grads[i] = Some(g);
                }
                Op::PadSpatial { x, pad } => {
                    let gx = ops::pad_spatial_backward(self.nodes[x.0].value.shape(), *pad, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::SliceRows { x, r0 } => {
                    let gx = ops::slice_rows_backward(self.nodes[x.0].value.shape(), *r0, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::UpsampleRows { x, factor } => {
                    let gx = ops::upsample_rows_backward(self.nodes[x.0].value.shape(), *factor, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(self.nodes[x.0].value.shape())?;
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
                Op::DotConst { x, coeffs } => {
                    let gx = coeffs.map(|v| v * g.item());
                    accumulate(&mut grads, *x, gx)?;
                    grads[i] = Some(g);
                }
            }
            debug_assert_eq!(grads[i].as_ref().unwrap().shape(), &node_value_shape[..]);
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: VarId, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            let summed = ops::add(existing, &g)?;
            *existing = summed;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = GradTape::new();
        let x = tape
            .leaf(Tensor::new(vec![2, 2, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap())
            .unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let unused = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.for_param(unused, &[3]).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tape_reuse_is_a_contract_error() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        // Recording after consumption is also rejected.
        let mut tape2 = GradTape::new();
        let x2 = tape2.leaf(Tensor::scalar(1.0)).unwrap();
        let l2 = tape2.sum(x2).unwrap();
        tape2.backward(l2).unwrap();
        assert!(tape2.leaf(Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // loss = sum(x + x) => dloss/dx = 2 everywhere.
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn gradient_shapes_match_parameters() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 2])).unwrap();
        let w = tape.leaf(Tensor::filled(&[3, 3, 2, 3], 0.1)).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let y = tape.conv2d(x, w, b, (1, 1), Padding::same(3, 3)).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().shape(), &[3, 3, 2, 3]);
        assert_eq!(grads.get(b).unwrap().shape(), &[3]);
    }
}
