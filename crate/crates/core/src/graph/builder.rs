use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{infer_extent, Block, ConvLayer, Extent, Layer, LayerNode, Network, NodeId, StructureKind};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, DenseParams, FilterTensor};

/// Incremental network construction with shape checking and seeded He
/// initialization. Prunability flags are derived from the structure in
/// [`NetworkBuilder::finish`].
pub struct NetworkBuilder {
    nodes: Vec<LayerNode>,
    extents: Vec<Extent>,
    blocks: Vec<Block>,
    current_block: Option<usize>,
    rng: ChaCha8Rng,
}

impl NetworkBuilder {
    pub fn new(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let input = LayerNode {
            id: 0,
            name: "input".into(),
            layer: Layer::Input {
                channels,
                height,
                width,
            },
            inputs: vec![],
            prunable: false,
            block: None,
        };
        NetworkBuilder {
            nodes: vec![input],
            extents: vec![[channels, height, width]],
            blocks: Vec::new(),
            current_block: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn extent(&self, id: NodeId) -> Extent {
        self.extents[id]
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.extents[id][0]
    }

    /// Opens a structural block; nodes added until [`end_block`](Self::end_block) belong to it.
    pub fn begin_block(&mut self, kind: StructureKind, name: impl Into<String>) -> usize {
        let id = self.blocks.len();
        self.blocks.push(Block {
            id,
            kind,
            name: name.into(),
        });
        self.current_block = Some(id);
        id
    }

    pub fn end_block(&mut self) {
        self.current_block = None;
    }

    fn push(&mut self, name: String, layer: Layer, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::Usage(format!("input {bad} does not exist yet")));
        }
        let node = LayerNode {
            id,
            name,
            layer,
            inputs,
            prunable: false,
            block: self.current_block,
        };
        let ins: Vec<Extent> = node.inputs.iter().map(|&i| self.extents[i]).collect();
        let extent = infer_extent(&node, &ins)?;
        self.extents.push(extent);
        self.nodes.push(node);
        Ok(id)
    }

    fn he_normal(&mut self, fan_in: usize, count: usize) -> Vec<f64> {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        (0..count).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn conv(
        &mut self,
        from: NodeId,
        n_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<NodeId> {
        let n_in = self.channels(from);
        let weights = self.he_normal(n_in * kernel * kernel, n_out * n_in * kernel * kernel);
        let filters = FilterTensor::new(n_out, n_in, kernel, weights, bias.then(|| vec![0.0; n_out]))?;
        let name = format!("conv{}", self.nodes.len());
        self.push(
            name,
            Layer::Conv(ConvLayer {
                filters,
                stride,
                padding,
            }),
            vec![from],
        )
    }

    pub fn batch_norm(&mut self, from: NodeId) -> Result<NodeId> {
        let c = self.channels(from);
        self.push(format!("bn{}", self.nodes.len()), Layer::BatchNorm(BatchNormParams::identity(c)), vec![from])
    }

    /// Batchnorm whose scale starts at zero, so a residual branch ending in it
    /// starts out as the identity.
    pub fn zero_batch_norm(&mut self, from: NodeId) -> Result<NodeId> {
        let c = self.channels(from);
        let mut params = BatchNormParams::identity(c);
        params.scale.fill(0.0);
        self.push(format!("bn{}", self.nodes.len()), Layer::BatchNorm(params), vec![from])
    }

    pub fn relu(&mut self, from: NodeId) -> Result<NodeId> {
        self.push(format!("relu{}", self.nodes.len()), Layer::Relu, vec![from])
    }

    /// `conv → batchnorm → relu`, returning the relu id.
    pub fn conv_bn_relu(
        &mut self,
        from: NodeId,
        n_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<NodeId> {
        let c = self.conv(from, n_out, kernel, stride, padding, bias)?;
        let b = self.batch_norm(c)?;
        self.relu(b)
    }

    pub fn max_pool(&mut self, from: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        self.push(
            format!("maxpool{}", self.nodes.len()),
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            },
            vec![from],
        )
    }

    pub fn avg_pool(&mut self, from: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        self.push(format!("avgpool{}", self.nodes.len()), Layer::AvgPool { kernel, stride }, vec![from])
    }

    pub fn global_avg_pool(&mut self, from: NodeId) -> Result<NodeId> {
        self.push(format!("gap{}", self.nodes.len()), Layer::GlobalAvgPool, vec![from])
    }

    pub fn dense(&mut self, from: NodeId, out_features: usize) -> Result<NodeId> {
        let in_features: usize = self.extent(from).iter().product();
        let dist = Normal::new(0.0, (1.0 / in_features as f64).sqrt()).expect("positive std");
        let weights = (0..in_features * out_features).map(|_| dist.sample(&mut self.rng)).collect();
        let params = DenseParams {
            in_features,
            out_features,
            weights,
            bias: vec![0.0; out_features],
        };
        self.push(format!("fc{}", self.nodes.len()), Layer::Dense(params), vec![from])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(format!("add{}", self.nodes.len()), Layer::Add, vec![a, b])
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.push(format!("cat{}", self.nodes.len()), Layer::Concat, inputs.to_vec())
    }

    pub fn channel_pad(&mut self, from: NodeId, stride: usize, front: usize, back: usize) -> Result<NodeId> {
        self.push(
            format!("pad{}", self.nodes.len()),
            Layer::ChannelPad { stride, front, back },
            vec![from],
        )
    }

    /// Appends the output node and derives prunability flags.
    pub fn finish(mut self, logits: NodeId) -> Result<Network> {
        self.current_block = None;
        self.push("output".into(), Layer::Output, vec![logits])?;
        let num_classes = self.extents[logits][0];
        let mut net = Network {
            nodes: self.nodes,
            blocks: self.blocks,
            num_classes,
            metadata: BTreeMap::new(),
        };
        let consumers = net.consumers();
        for id in net.conv_ids() {
            net.nodes[id].prunable = net.may_prune(id, &consumers);
        }
        net.validate().map_err(|e| match e {
            Error::Format { message, .. } => Error::Usage(message),
            other => other,
        })?;
        Ok(net)
    }
}
