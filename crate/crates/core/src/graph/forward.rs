use std::collections::BTreeMap;

use super::{Layer, Network, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor4};

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `g × num_classes × 1 × 1`.
    pub logits: Tensor4,
    pub captured: BTreeMap<NodeId, Tensor4>,
}

/// Result of a training-mode forward pass. Activations are only present when
/// caching was requested; [`Network::backward`] needs them.
#[derive(Clone, Debug)]
pub struct Trace {
    pub logits: Tensor4,
    activations: Option<Vec<Tensor4>>,
}

impl Trace {
    pub fn is_cached(&self) -> bool {
        self.activations.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Conv { weights: Vec<f64>, bias: Option<Vec<f64>> },
    BatchNorm { scale: Vec<f64>, shift: Vec<f64> },
    Dense { weights: Vec<f64>, bias: Vec<f64> },
}

/// Parameter gradients indexed by node id, plus the gradient with respect to the batch.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Option<ParamGrad>>,
    pub input: Tensor4,
}

impl Network {
    fn check_batch(&self, batch: &Tensor4) -> Result<()> {
        let [c, h, w] = self.input_dims();
        let [_, bc, bh, bw] = batch.dims();
        if (bc, bh, bw) != (c, h, w) {
            return Err(Error::Shape(format!(
                "batch {} does not match network input {c}x{h}x{w}",
                batch.shape_str()
            )));
        }
        Ok(())
    }

    fn eval(&self, id: NodeId, ins: &[&Tensor4]) -> Result<Tensor4> {
        let node = &self.nodes[id];
        match &node.layer {
            Layer::Input { .. } => unreachable!("input is seeded, not evaluated"),
            Layer::Conv(c) => tensor::conv2d_forward(ins[0], &c.filters, c.stride, c.padding),
            Layer::Relu => Ok(tensor::relu_forward(ins[0])),
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => tensor::max_pool_forward(ins[0], *kernel, *stride, *padding),
            Layer::AvgPool { kernel, stride } => tensor::avg_pool_forward(ins[0], *kernel, *stride),
            Layer::GlobalAvgPool => Ok(tensor::global_avg_pool_forward(ins[0])),
            Layer::BatchNorm(p) => tensor::batchnorm_forward(ins[0], p),
            Layer::Dense(p) => tensor::dense_forward(ins[0], p),
            Layer::Add => tensor::add_forward(ins[0], ins[1]),
            Layer::Concat => tensor::concat_channels(ins),
            Layer::ChannelPad { stride, front, back } => {
                tensor::channel_pad_forward(ins[0], *stride, *front, *back)
            }
            Layer::Output => Ok(ins[0].clone()),
        }
    }

    /// Inference pass returning logits and the feature maps of the requested conv layers.
    pub fn forward(&self, batch: &Tensor4, capture: &[NodeId]) -> Result<ForwardOutput> {
        if let Some(&bad) = capture.iter().find(|&&id| self.conv(id).is_none()) {
            return Err(Error::Usage(format!("capture id {bad} is not a convolutional layer")));
        }
        self.forward_nodes(batch, capture)
    }

    /// Like [`forward`](Self::forward) but may capture any node. Activations are
    /// released as soon as their last consumer has run.
    pub fn forward_nodes(&self, batch: &Tensor4, capture: &[NodeId]) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        if let Some(&bad) = capture.iter().find(|&&id| id >= self.nodes.len()) {
            return Err(Error::Usage(format!("capture id {bad} does not exist")));
        }
        let n = self.nodes.len();
        let mut last_use = vec![0usize; n];
        for node in &self.nodes {
            for &i in &node.inputs {
                last_use[i] = last_use[i].max(node.id);
            }
        }
        let mut acts: Vec<Option<Tensor4>> = vec![None; n];
        let mut captured = BTreeMap::new();
        acts[0] = Some(batch.clone());
        for id in 1..n {
            let out = {
                let ins: Vec<&Tensor4> = self.nodes[id]
                    .inputs
                    .iter()
                    .map(|&i| acts[i].as_ref().expect("input still live"))
                    .collect();
                self.eval(id, &ins)?
            };
            acts[id] = Some(out);
            for &i in &self.nodes[id].inputs {
                if last_use[i] == id {
                    if let Some(t) = acts[i].take() {
                        if capture.contains(&i) {
                            captured.insert(i, t);
                        }
                    }
                }
            }
        }
        let logits = acts[n - 1].take().expect("output evaluated");
        Ok(ForwardOutput { logits, captured })
    }

    pub fn forward_traced(&self, batch: &Tensor4, cache: bool) -> Result<Trace> {
        if !cache {
            let out = self.forward_nodes(batch, &[])?;
            return Ok(Trace {
                logits: out.logits,
                activations: None,
            });
        }
        self.check_batch(batch)?;
        let mut acts: Vec<Tensor4> = Vec::with_capacity(self.nodes.len());
        acts.push(batch.clone());
        for id in 1..self.nodes.len() {
            let ins: Vec<&Tensor4> = self.nodes[id].inputs.iter().map(|&i| &acts[i]).collect();
            let out = self.eval(id, &ins)?;
            acts.push(out);
        }
        Ok(Trace {
            logits: acts.last().expect("nonempty").clone(),
            activations: Some(acts),
        })
    }

    /// Reverse-mode pass over the whole graph from a gradient on the logits.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor4) -> Result<Gradients> {
        let acts = trace
            .activations
            .as_ref()
            .ok_or_else(|| Error::State("backward called on a forward pass run without caching".into()))?;
        if acts.len() != self.nodes.len() {
            return Err(Error::State("trace was recorded on a different network".into()));
        }
        if grad_logits.dims() != trace.logits.dims() {
            return Err(Error::Shape(format!(
                "logit gradient {} does not match logits {}",
                grad_logits.shape_str(),
                trace.logits.shape_str()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor4>> = vec![None; n];
        let mut params: Vec<Option<ParamGrad>> = vec![None; n];
        grads[n - 1] = Some(grad_logits.clone());

        for id in (1..n).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let x = |k: usize| &acts[node.inputs[k]];
            let input_grads: Vec<Tensor4> = match &node.layer {
                Layer::Input { .. } => unreachable!(),
                Layer::Conv(c) => {
                    let g = tensor::conv2d_backward(x(0), &c.filters, c.stride, c.padding, &upstream)?;
                    params[id] = Some(ParamGrad::Conv {
                        weights: g.weights,
                        bias: g.bias,
                    });
                    vec![g.input]
                }
                Layer::Relu => vec![tensor::relu_backward(x(0), &upstream)?],
                Layer::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => vec![tensor::max_pool_backward(x(0), *kernel, *stride, *padding, &upstream)?],
                Layer::AvgPool { kernel, stride } => {
                    vec![tensor::avg_pool_backward(x(0), *kernel, *stride, &upstream)?]
                }
                Layer::GlobalAvgPool => vec![tensor::global_avg_pool_backward(x(0), &upstream)?],
                Layer::BatchNorm(p) => {
                    let g = tensor::batchnorm_backward(x(0), p, &upstream)?;
                    params[id] = Some(ParamGrad::BatchNorm {
                        scale: g.scale,
                        shift: g.shift,
                    });
                    vec![g.input]
                }
                Layer::Dense(p) => {
                    let g = tensor::dense_backward(x(0), p, &upstream)?;
                    params[id] = Some(ParamGrad::Dense {
                        weights: g.weights,
                        bias: g.bias,
                    });
                    vec![g.input]
                }
                Layer::Add => {
                    let (a, b) = tensor::add_backward(&upstream);
                    vec![a, b]
                }
                Layer::Concat => {
                    let counts: Vec<usize> = node.inputs.iter().map(|&i| acts[i].channels()).collect();
                    tensor::concat_backward(&upstream, &counts)?
                }
                Layer::ChannelPad { stride, front, back } => {
                    vec![tensor::channel_pad_backward(x(0), *stride, *front, *back, &upstream)?]
                }
                Layer::Output => vec![upstream],
            };
            for (&src, g) in node.inputs.iter().zip(input_grads) {
                match &mut grads[src] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let input = grads[0].take().unwrap_or_else(|| Tensor4::zeros(acts[0].dims()));
        Ok(Gradients { params, input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkBuilder;

    fn toy() -> Network {
        let mut b = NetworkBuilder::new(1, 6, 6, 3);
        let c = b.conv(0, 3, 3, 1, 1, true).unwrap();
        let r = b.relu(c).unwrap();
        let p = b.global_avg_pool(r).unwrap();
        let d = b.dense(p, 2).unwrap();
        b.finish(d).unwrap()
    }

    fn batch() -> Tensor4 {
        let data = (0..72).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        Tensor4::from_vec([2, 1, 6, 6], data).unwrap()
    }

    #[test]
    fn empty_capture_returns_logits_only() {
        let out = toy().forward(&batch(), &[]).unwrap();
        assert!(out.captured.is_empty());
        assert_eq!(out.logits.dims(), [2, 2, 1, 1]);
    }

    #[test]
    fn captured_map_equals_conv_output() {
        let net = toy();
        let out = net.forward(&batch(), &[1]).unwrap();
        let conv = net.conv(1).unwrap();
        let direct = tensor::conv2d_forward(&batch(), &conv.filters, 1, 1).unwrap();
        assert_eq!(out.captured[&1], direct);
    }

    #[test]
    fn capturing_a_non_conv_is_a_usage_error() {
        assert!(matches!(toy().forward(&batch(), &[2]), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let net = toy();
        let a = net.forward(&batch(), &[]).unwrap().logits;
        let b = net.forward(&batch(), &[]).unwrap().logits;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn backward_without_cache_is_a_state_error() {
        let net = toy();
        let trace = net.forward_traced(&batch(), false).unwrap();
        let g = Tensor4::zeros(trace.logits.dims());
        assert!(matches!(net.backward(&trace, &g), Err(Error::State(_))));
    }

    #[test]
    fn gradient_shapes_follow_parameters() {
        let net = toy();
        let trace = net.forward_traced(&batch(), true).unwrap();
        let g = Tensor4::filled(trace.logits.dims(), 1.0);
        let grads = net.backward(&trace, &g).unwrap();
        match &grads.params[1] {
            Some(ParamGrad::Conv { weights, bias }) => {
                assert_eq!(weights.len(), 27);
                assert_eq!(bias.as_ref().map(Vec::len), Some(3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(grads.input.dims(), [2, 1, 6, 6]);
    }
}
