//! CNNs as ordered layer DAGs.
//!
//! Node ids equal positions in the node list and every node only reads from
//! earlier ids, so the list order is a topological order. Surgery never adds or
//! removes nodes; it only shrinks parameter tensors, so ids stay stable across
//! pruning and rank statistics keep pointing at the right layers.

mod builder;
mod forward;
pub mod format;
pub mod presets;

pub use builder::NetworkBuilder;
pub use forward::{ForwardOutput, Gradients, ParamGrad, Trace};
pub use presets::{build_preset, PresetOptions, PresetRegistry};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, DenseParams, FilterTensor};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Plain,
    Inception,
    Residual,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub kind: StructureKind,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub filters: FilterTensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Input { channels: usize, height: usize, width: usize },
    Conv(ConvLayer),
    Relu,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm(BatchNormParams),
    Dense(DenseParams),
    Add,
    Concat,
    /// Parameter-free residual shortcut (spatial subsampling plus zero channels).
    ChannelPad { stride: usize, front: usize, back: usize },
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv,
    Relu,
    Maxpool,
    Avgpool,
    GlobalAvgpool,
    Batchnorm,
    Dense,
    Add,
    Concat,
    ChannelPad,
    Output,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Input { .. } => LayerKind::Input,
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::Maxpool,
            Layer::AvgPool { .. } => LayerKind::Avgpool,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgpool,
            Layer::BatchNorm(_) => LayerKind::Batchnorm,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Add => LayerKind::Add,
            Layer::Concat => LayerKind::Concat,
            Layer::ChannelPad { .. } => LayerKind::ChannelPad,
            Layer::Output => LayerKind::Output,
        }
    }

    /// Layers that map channel `c` of their input to channel `c` of their output.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            Layer::Relu
                | Layer::BatchNorm(_)
                | Layer::MaxPool { .. }
                | Layer::AvgPool { .. }
                | Layer::GlobalAvgPool
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    pub prunable: bool,
    pub block: Option<usize>,
}

/// Output extent of one node: `(channels, height, width)`.
pub type Extent = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    nodes: Vec<LayerNode>,
    blocks: Vec<Block>,
    num_classes: usize,
    /// Free-form provenance; not part of the fingerprint.
    pub metadata: BTreeMap<String, String>,
}

impl Network {
    pub(crate) fn from_parts(
        nodes: Vec<LayerNode>,
        blocks: Vec<Block>,
        num_classes: usize,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let net = Network {
            nodes,
            blocks,
            num_classes,
            metadata,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&LayerNode> {
        self.nodes.get(id)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, id: usize) -> Option<&Block> {
        self.blocks.get(id)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dims(&self) -> Extent {
        match self.nodes[0].layer {
            Layer::Input {
                channels,
                height,
                width,
            } => [channels, height, width],
            _ => unreachable!("validated: node 0 is the input"),
        }
    }

    pub fn output_id(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn conv(&self, id: NodeId) -> Option<&ConvLayer> {
        match self.nodes.get(id).map(|n| &n.layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    /// Mutable access to a convolution's weights; shapes cannot be changed this way.
    pub fn conv_mut(&mut self, id: NodeId) -> Option<&mut ConvLayer> {
        match self.nodes.get_mut(id).map(|n| &mut n.layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn batchnorm_mut(&mut self, id: NodeId) -> Option<&mut BatchNormParams> {
        match self.nodes.get_mut(id).map(|n| &mut n.layer) {
            Some(Layer::BatchNorm(p)) => Some(p),
            _ => None,
        }
    }

    pub fn dense_mut(&mut self, id: NodeId) -> Option<&mut DenseParams> {
        match self.nodes.get_mut(id).map(|n| &mut n.layer) {
            Some(Layer::Dense(p)) => Some(p),
            _ => None,
        }
    }

    pub(crate) fn layer_mut(&mut self, id: NodeId) -> &mut Layer {
        &mut self.nodes[id].layer
    }

    pub fn conv_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Conv(_)))
            .map(|n| n.id)
            .collect()
    }

    /// The `K` convolutional layers eligible for filter pruning.
    pub fn prunable_conv_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.prunable).map(|n| n.id).collect()
    }

    /// For each node, the ids of nodes that read from it.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                if !out[i].contains(&node.id) {
                    out[i].push(node.id);
                }
            }
        }
        out
    }

    /// Output extent of every node, checking shape compatibility on the way.
    pub fn extents(&self) -> Result<Vec<Extent>> {
        let mut ext: Vec<Extent> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Extent> = node.inputs.iter().map(|&i| ext[i]).collect();
            ext.push(infer_extent(node, &ins)?);
        }
        Ok(ext)
    }

    /// Follows the chain of batchnorm/ReLU stages that exclusively consume a
    /// convolution's output and returns the last one (the conv itself if none).
    pub fn block_output(&self, conv: NodeId) -> NodeId {
        let consumers = self.consumers();
        let mut cur = conv;
        loop {
            match consumers[cur].as_slice() {
                [next]
                    if matches!(self.nodes[*next].layer, Layer::BatchNorm(_) | Layer::Relu)
                        && self.nodes[*next].inputs == [cur] =>
                {
                    cur = *next
                }
                _ => return cur,
            }
        }
    }

    /// The batchnorm that directly and exclusively normalizes a convolution's output.
    pub fn owned_batchnorm(&self, conv: NodeId) -> Option<NodeId> {
        let consumers = self.consumers();
        match consumers.get(conv)?.as_slice() {
            [next]
                if matches!(self.nodes[*next].layer, Layer::BatchNorm(_))
                    && self.nodes[*next].inputs == [conv] =>
            {
                Some(*next)
            }
            _ => None,
        }
    }

    /// Content fingerprint over structure, flags and parameters (metadata excluded).
    pub fn fingerprint(&self) -> String {
        let mut bare = self.clone();
        bare.metadata.clear();
        crate::fingerprint::digest(&format::encode(&bare))
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::format("node table", msg));
        if self.nodes.len() < 2 {
            return bad("a network needs at least an input and an output node".into());
        }
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                return bad(format!("node at position {pos} has id {}", node.id));
            }
            if let Some(&late) = node.inputs.iter().find(|&&i| i >= pos) {
                return bad(format!("node {pos} reads from node {late}, which is not earlier"));
            }
            let arity_ok = match node.layer {
                Layer::Input { .. } => node.inputs.is_empty(),
                Layer::Add => node.inputs.len() == 2,
                Layer::Concat => !node.inputs.is_empty(),
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return bad(format!(
                    "node {pos} ({:?}) has {} inputs",
                    node.layer.kind(),
                    node.inputs.len()
                ));
            }
            let is_input = matches!(node.layer, Layer::Input { .. });
            let is_output = matches!(node.layer, Layer::Output);
            if is_input != (pos == 0) {
                return bad("exactly one input node is allowed, at position 0".into());
            }
            if is_output != (pos == self.nodes.len() - 1) {
                return bad("exactly one output node is allowed, at the last position".into());
            }
            if node.prunable && !matches!(node.layer, Layer::Conv(_)) {
                return bad(format!("node {pos} is flagged prunable but is not a convolution"));
            }
            if let Some(b) = node.block {
                if b >= self.blocks.len() {
                    return bad(format!("node {pos} refers to missing block {b}"));
                }
            }
        }
        let consumers = self.consumers();
        let output = self.nodes.len() - 1;
        for (id, c) in consumers.iter().enumerate() {
            if id != output && c.is_empty() {
                return bad(format!("node {id} does not feed anything"));
            }
        }
        let ext = self.extents().map_err(|e| Error::format("node table", e.to_string()))?;
        let out = ext[output];
        if out != [self.num_classes, 1, 1] {
            return bad(format!(
                "output extent {out:?} does not match {} classes",
                self.num_classes
            ));
        }
        for id in self.conv_ids() {
            if self.nodes[id].prunable && !self.may_prune(id, &consumers) {
                return bad(format!(
                    "conv node {id} is flagged prunable but its width is pinned by the structure"
                ));
            }
        }
        Ok(())
    }

    /// Structural pruning rules: a conv whose channels reach a residual add (or
    /// the network output) must keep its width, and inside an inception module
    /// a 1×1 reduction feeding a larger kernel is left alone.
    pub(crate) fn may_prune(&self, conv: NodeId, consumers: &[Vec<NodeId>]) -> bool {
        let mut stack = vec![conv];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(cur) = stack.pop() {
            for &next in &consumers[cur] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                match &self.nodes[next].layer {
                    Layer::Add | Layer::Output => return false,
                    Layer::Conv(_) | Layer::Dense(_) => {}
                    _ => stack.push(next),
                }
            }
        }
        let node = &self.nodes[conv];
        let in_inception = node
            .block
            .and_then(|b| self.blocks.get(b))
            .is_some_and(|b| b.kind == StructureKind::Inception);
        if in_inception {
            if let Layer::Conv(c) = &node.layer {
                if c.filters.kernel() == 1 && self.feeds_larger_kernel(conv, consumers) {
                    return false;
                }
            }
        }
        true
    }

    fn feeds_larger_kernel(&self, conv: NodeId, consumers: &[Vec<NodeId>]) -> bool {
        let mut stack = vec![conv];
        while let Some(cur) = stack.pop() {
            for &next in &consumers[cur] {
                match &self.nodes[next].layer {
                    Layer::Conv(c) if c.filters.kernel() > 1 => return true,
                    Layer::BatchNorm(_) | Layer::Relu => stack.push(next),
                    _ => {}
                }
            }
        }
        false
    }
}

pub(crate) fn infer_extent(node: &LayerNode, ins: &[Extent]) -> Result<Extent> {
    let shape_err = |msg: String| Err(Error::Shape(format!("node {} ({}): {msg}", node.id, node.name)));
    let pool = |size: usize, k: usize, s: usize, p: usize| -> Option<usize> {
        (k > 0 && s > 0 && p < k && size + 2 * p >= k).then(|| (size + 2 * p - k) / s + 1)
    };
    Ok(match &node.layer {
        Layer::Input {
            channels,
            height,
            width,
        } => [*channels, *height, *width],
        Layer::Conv(conv) => {
            let [c, h, w] = ins[0];
            let f = &conv.filters;
            if c != f.n_in() {
                return shape_err(format!("{c} input channels, filters {}", f.shape_str()));
            }
            match (
                conv_extent(h, f.kernel(), conv.stride, conv.padding),
                conv_extent(w, f.kernel(), conv.stride, conv.padding),
            ) {
                (Some(ho), Some(wo)) => [f.n_out(), ho, wo],
                _ => return shape_err(format!("kernel {} does not fit {h}x{w}", f.kernel())),
            }
        }
        Layer::Relu => ins[0],
        Layer::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            let [c, h, w] = ins[0];
            match (pool(h, *kernel, *stride, *padding), pool(w, *kernel, *stride, *padding)) {
                (Some(ho), Some(wo)) => [c, ho, wo],
                _ => return shape_err(format!("max pool does not fit {h}x{w}")),
            }
        }
        Layer::AvgPool { kernel, stride } => {
            let [c, h, w] = ins[0];
            match (pool(h, *kernel, *stride, 0), pool(w, *kernel, *stride, 0)) {
                (Some(ho), Some(wo)) => [c, ho, wo],
                _ => return shape_err(format!("avg pool does not fit {h}x{w}")),
            }
        }
        Layer::GlobalAvgPool => [ins[0][0], 1, 1],
        Layer::BatchNorm(p) => {
            if p.validate().is_err() || p.channels() != ins[0][0] {
                return shape_err(format!("batchnorm of {} channels on {:?}", p.channels(), ins[0]));
            }
            ins[0]
        }
        Layer::Dense(p) => {
            let features = ins[0].iter().product::<usize>();
            if p.validate().is_err() || p.in_features != features {
                return shape_err(format!(
                    "dense layer expects {} features, input has {features}",
                    p.in_features
                ));
            }
            [p.out_features, 1, 1]
        }
        Layer::Add => {
            if ins[0] != ins[1] {
                return shape_err(format!("add of {:?} and {:?}", ins[0], ins[1]));
            }
            ins[0]
        }
        Layer::Concat => {
            let [_, h, w] = ins[0];
            if ins.iter().any(|e| e[1] != h || e[2] != w) {
                return shape_err(format!("concat of mismatched extents {ins:?}"));
            }
            [ins.iter().map(|e| e[0]).sum(), h, w]
        }
        Layer::ChannelPad { stride, front, back } => {
            if *stride == 0 {
                return shape_err("channel pad stride is zero".into());
            }
            let [c, h, w] = ins[0];
            [front + c + back, h.div_ceil(*stride), w.div_ceil(*stride)]
        }
        Layer::Output => ins[0],
    })
}

fn conv_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (stride > 0 && size + 2 * pad >= k).then(|| (size + 2 * pad - k) / stride + 1)
}
