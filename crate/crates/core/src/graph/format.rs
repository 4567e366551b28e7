//! Binary model container.
//!
//! ```text
//! offset      size  content
//! 0           8     magic "HRNKMODL"
//! 8           4     format version, u32 little-endian (currently 1)
//! 12          8     header length H, u64 little-endian
//! 20          H     header: UTF-8 JSON node table
//! 20+H        8·N   payload: every parameter tensor as f64 little-endian, in
//!                   node order and, within a node, in the order its header
//!                   entry lists them
//! end-32      32    SHA-256 of every preceding byte
//! ```
//!
//! Parameter order per node: conv `weights` (`n_out × n_in × k × k`) then
//! `bias` if present; batchnorm `scale`, `shift`, `mean`, `var`; dense
//! `weights` (`out × in`) then `bias`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Block, ConvLayer, Layer, LayerKind, LayerNode, Network, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, DenseParams, FilterTensor};

pub const MAGIC: &[u8; 8] = b"HRNKMODL";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    blocks: Vec<Block>,
    nodes: Vec<NodeEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    id: NodeId,
    name: String,
    kind: LayerKind,
    inputs: Vec<NodeId>,
    prunable: bool,
    block: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

fn meta_of(layer: &Layer) -> BTreeMap<String, f64> {
    let pairs: Vec<(&str, f64)> = match layer {
        Layer::Input {
            channels,
            height,
            width,
        } => vec![
            ("channels", *channels as f64),
            ("height", *height as f64),
            ("width", *width as f64),
        ],
        Layer::Conv(c) => vec![
            ("n_out", c.filters.n_out() as f64),
            ("n_in", c.filters.n_in() as f64),
            ("kernel", c.filters.kernel() as f64),
            ("stride", c.stride as f64),
            ("padding", c.padding as f64),
        ],
        Layer::MaxPool {
            kernel,
            stride,
            padding,
        } => vec![
            ("kernel", *kernel as f64),
            ("stride", *stride as f64),
            ("padding", *padding as f64),
        ],
        Layer::AvgPool { kernel, stride } => vec![("kernel", *kernel as f64), ("stride", *stride as f64)],
        Layer::BatchNorm(p) => vec![("channels", p.channels() as f64), ("eps", p.eps)],
        Layer::Dense(p) => vec![
            ("in_features", p.in_features as f64),
            ("out_features", p.out_features as f64),
        ],
        Layer::ChannelPad { stride, front, back } => vec![
            ("stride", *stride as f64),
            ("front", *front as f64),
            ("back", *back as f64),
        ],
        Layer::Relu | Layer::GlobalAvgPool | Layer::Add | Layer::Concat | Layer::Output => vec![],
    };
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn tensors_of(layer: &Layer) -> Vec<(&'static str, &[f64])> {
    match layer {
        Layer::Conv(c) => {
            let mut v = vec![("weights", c.filters.weights())];
            if let Some(b) = c.filters.bias() {
                v.push(("bias", b));
            }
            v
        }
        Layer::BatchNorm(p) => vec![
            ("scale", &p.scale[..]),
            ("shift", &p.shift[..]),
            ("mean", &p.mean[..]),
            ("var", &p.var[..]),
        ],
        Layer::Dense(p) => vec![("weights", &p.weights[..]), ("bias", &p.bias[..])],
        _ => vec![],
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let header = Header {
        num_classes: net.num_classes,
        blocks: net.blocks.clone(),
        nodes: net
            .nodes
            .iter()
            .map(|n| NodeEntry {
                id: n.id,
                name: n.name.clone(),
                kind: n.layer.kind(),
                inputs: n.inputs.clone(),
                prunable: n.prunable,
                block: n.block,
                meta: meta_of(&n.layer),
                tensors: tensors_of(&n.layer)
                    .into_iter()
                    .map(|(name, t)| TensorEntry {
                        name: name.to_string(),
                        len: t.len(),
                    })
                    .collect(),
            })
            .collect(),
        metadata: net.metadata.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload_len: usize = net
        .nodes
        .iter()
        .flat_map(|n| tensors_of(&n.layer))
        .map(|(_, t)| t.len() * 8)
        .sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload_len + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for node in &net.nodes {
        for (_, t) in tensors_of(&node.layer) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("magic", "file does not start with HRNKMODL"));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format("preamble", "file ends before the header length"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::format(
                "header",
                format!("declared header length {header_len} exceeds file size {}", bytes.len()),
            )
        })? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::format("header", e.to_string()))?;

    let declared: u64 = header
        .nodes
        .iter()
        .flat_map(|n| &n.tensors)
        .map(|t| t.len as u64)
        .try_fold(0u64, |acc, len| acc.checked_add(len.checked_mul(8)?))
        .ok_or_else(|| Error::format("weights", "declared tensor sizes overflow"))?;
    let available = (bytes.len() - header_end).saturating_sub(CHECKSUM_LEN) as u64;
    if bytes.len() - header_end < CHECKSUM_LEN || declared != available {
        return Err(Error::format(
            "weights",
            format!("header declares {declared} payload bytes but {available} are present"),
        ));
    }
    let body_end = bytes.len() - CHECKSUM_LEN;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::format("checksum", "SHA-256 of file contents does not match"));
    }

    let mut cursor = header_end;
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for entry in header.nodes {
        let mut tensors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in &entry.tensors {
            let raw = &bytes[cursor..cursor + t.len * 8];
            cursor += t.len * 8;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.insert(t.name.clone(), values).is_some() {
                return Err(Error::format(
                    "node table",
                    format!("node {} lists tensor {} twice", entry.id, t.name),
                ));
            }
        }
        let layer = rebuild_layer(&entry, tensors)?;
        nodes.push(LayerNode {
            id: entry.id,
            name: entry.name,
            layer,
            inputs: entry.inputs,
            prunable: entry.prunable,
            block: entry.block,
        });
    }
    Network::from_parts(nodes, header.blocks, header.num_classes, header.metadata)
}

fn rebuild_layer(entry: &NodeEntry, mut tensors: BTreeMap<String, Vec<f64>>) -> Result<Layer> {
    let bad = |msg: String| Error::format("node table", format!("node {}: {msg}", entry.id));
    let meta = |key: &str| -> Result<usize> {
        let v = *entry
            .meta
            .get(key)
            .ok_or_else(|| bad(format!("missing meta field {key}")))?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(bad(format!("meta field {key} = {v} is not a count")));
        }
        Ok(v as usize)
    };
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")));
    let layer = match entry.kind {
        LayerKind::Input => Layer::Input {
            channels: meta("channels")?,
            height: meta("height")?,
            width: meta("width")?,
        },
        LayerKind::Conv => {
            let weights = take("weights")?;
            let bias = tensors.remove("bias");
            let filters = FilterTensor::new(meta("n_out")?, meta("n_in")?, meta("kernel")?, weights, bias)
                .map_err(|e| bad(e.to_string()))?;
            Layer::Conv(ConvLayer {
                filters,
                stride: meta("stride")?,
                padding: meta("padding")?,
            })
        }
        LayerKind::Relu => Layer::Relu,
        LayerKind::Maxpool => Layer::MaxPool {
            kernel: meta("kernel")?,
            stride: meta("stride")?,
            padding: meta("padding")?,
        },
        LayerKind::Avgpool => Layer::AvgPool {
            kernel: meta("kernel")?,
            stride: meta("stride")?,
        },
        LayerKind::GlobalAvgpool => Layer::GlobalAvgPool,
        LayerKind::Batchnorm => {
            let p = BatchNormParams {
                scale: take("scale")?,
                shift: take("shift")?,
                mean: take("mean")?,
                var: take("var")?,
                eps: *entry.meta.get("eps").ok_or_else(|| bad("missing meta field eps".into()))?,
            };
            p.validate().map_err(|e| bad(e.to_string()))?;
            Layer::BatchNorm(p)
        }
        LayerKind::Dense => {
            let p = DenseParams {
                in_features: meta("in_features")?,
                out_features: meta("out_features")?,
                weights: take("weights")?,
                bias: take("bias")?,
            };
            p.validate().map_err(|e| bad(e.to_string()))?;
            Layer::Dense(p)
        }
        LayerKind::Add => Layer::Add,
        LayerKind::Concat => Layer::Concat,
        LayerKind::ChannelPad => Layer::ChannelPad {
            stride: meta("stride")?,
            front: meta("front")?,
            back: meta("back")?,
        },
        LayerKind::Output => Layer::Output,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(layer)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
