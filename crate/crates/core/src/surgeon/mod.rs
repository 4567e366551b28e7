//! Structural pruning: remove filters and shrink every consumer to match.
//!
//! Each node is assigned the list of original channel indices that survive in
//! its output. A pruned convolution takes its list from the plan; channelwise
//! layers pass their input's list through; concatenation offsets and joins
//! them; a residual add or the network output only accepts full width.

mod complexity;

pub use complexity::{count_complexity, format_count, reduction_report, ComplexityReport, LayerComplexity, Reduction};

use crate::error::{Error, Result};
use crate::graph::{ConvLayer, Layer, Network};
use crate::planner::PruningPlan;

/// Surviving original channel indices of one node's output.
#[derive(Clone, Debug, PartialEq, Eq)]
struct ChannelMap {
    width: usize,
    kept: Vec<usize>,
}

impl ChannelMap {
    fn full(width: usize) -> Self {
        ChannelMap {
            width,
            kept: (0..width).collect(),
        }
    }

    fn is_full(&self) -> bool {
        self.kept.len() == self.width
    }
}

/// Returns a pruned copy of `net`; the input is left untouched. Node ids,
/// blocks and prunability flags carry over unchanged.
pub fn apply_plan(net: &Network, plan: &PruningPlan) -> Result<Network> {
    plan.check_against(net)?;
    let extents = net.extents()?;
    let mut maps: Vec<ChannelMap> = Vec::with_capacity(net.nodes().len());
    let mut nodes = net.nodes().to_vec();

    for (id, node) in net.nodes().iter().enumerate() {
        let input_map = |k: usize| &maps[node.inputs[k]];
        let out = match &node.layer {
            Layer::Input { channels, .. } => ChannelMap::full(*channels),
            Layer::Conv(conv) => {
                let n_out = conv.filters.n_out();
                let out_map = match plan.layer(id) {
                    Some(l) => ChannelMap {
                        width: n_out,
                        kept: l.keep.clone(),
                    },
                    None => ChannelMap::full(n_out),
                };
                let ins = input_map(0);
                if !(ins.is_full() && out_map.is_full()) {
                    nodes[id].layer = Layer::Conv(ConvLayer {
                        filters: conv.filters.select(&out_map.kept, &ins.kept),
                        stride: conv.stride,
                        padding: conv.padding,
                    });
                }
                out_map
            }
            Layer::BatchNorm(p) => {
                let ins = input_map(0).clone();
                if !ins.is_full() {
                    nodes[id].layer = Layer::BatchNorm(p.select(&ins.kept));
                }
                ins
            }
            Layer::Relu | Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::GlobalAvgPool => input_map(0).clone(),
            Layer::Dense(p) => {
                let ins = input_map(0);
                if !ins.is_full() {
                    let [c, h, w] = extents[node.inputs[0]];
                    debug_assert_eq!(c, ins.width);
                    let spatial = h * w;
                    let features: Vec<usize> = ins
                        .kept
                        .iter()
                        .flat_map(|&ch| ch * spatial..(ch + 1) * spatial)
                        .collect();
                    nodes[id].layer = Layer::Dense(p.select_inputs(&features));
                }
                ChannelMap::full(p.out_features)
            }
            Layer::Add => {
                for k in 0..2 {
                    if !input_map(k).is_full() {
                        return Err(Error::Plan(format!(
                            "add node {id} ({}) would lose channels from input {}; residual widths must be preserved",
                            node.name, node.inputs[k]
                        )));
                    }
                }
                input_map(0).clone()
            }
            Layer::Concat => {
                let mut width = 0;
                let mut kept = Vec::new();
                for k in 0..node.inputs.len() {
                    let m = input_map(k);
                    kept.extend(m.kept.iter().map(|&c| c + width));
                    width += m.width;
                }
                ChannelMap { width, kept }
            }
            Layer::ChannelPad { front, back, .. } => {
                let m = input_map(0);
                let kept = (0..*front)
                    .chain(m.kept.iter().map(|&c| c + front))
                    .chain(front + m.width..front + m.width + back)
                    .collect();
                ChannelMap {
                    width: front + m.width + back,
                    kept,
                }
            }
            Layer::Output => {
                if !input_map(0).is_full() {
                    return Err(Error::Plan("the network output would lose channels".into()));
                }
                input_map(0).clone()
            }
        };
        maps.push(out);
    }

    let mut metadata = net.metadata.clone();
    if !plan.is_noop() {
        metadata.insert("pruned_from".into(), net.fingerprint());
        metadata.insert("plan_variant".into(), plan.provenance.variant.clone());
    }
    Network::from_parts(nodes, net.blocks().to_vec(), net.num_classes(), metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkBuilder;
    use crate::planner::{LayerPlan, Provenance};

    fn provenance() -> Provenance {
        Provenance {
            variant: "hrank".into(),
            seed: None,
            stats_fingerprint: String::new(),
            model_fingerprint: String::new(),
        }
    }

    fn plan(layers: Vec<LayerPlan>) -> PruningPlan {
        PruningPlan {
            provenance: provenance(),
            layers,
        }
    }

    fn two_convs() -> Network {
        let mut b = NetworkBuilder::new(2, 6, 6, 5);
        let x = b.conv_bn_relu(0, 4, 3, 1, 1, true).unwrap();
        let x = b.conv_bn_relu(x, 5, 3, 1, 1, false).unwrap();
        let p = b.global_avg_pool(x).unwrap();
        let d = b.dense(p, 3).unwrap();
        b.finish(d).unwrap()
    }

    #[test]
    fn next_conv_loses_the_matching_input_slice() {
        let net = two_convs();
        let pruned = apply_plan(&net, &plan(vec![LayerPlan::from_prune(1, 4, [2])])).unwrap();
        let before = &net.conv(4).unwrap().filters;
        let after = &pruned.conv(4).unwrap().filters;
        assert_eq!(after.dims(), [5, 3, 3, 3]);
        let k2 = 9;
        for f in 0..5 {
            let b = before.filter(f);
            let a = after.filter(f);
            assert_eq!(&a[..2 * k2], &b[..2 * k2]);
            assert_eq!(&a[2 * k2..], &b[3 * k2..]);
        }
        let c1 = &pruned.conv(1).unwrap().filters;
        assert_eq!(c1.filter(2), net.conv(1).unwrap().filters.filter(3));
        assert_eq!(c1.bias().unwrap().len(), 3);
    }

    #[test]
    fn empty_plan_is_identity() {
        let net = two_convs();
        assert_eq!(apply_plan(&net, &plan(vec![])).unwrap(), net);
    }

    #[test]
    fn dense_inputs_are_sliced_per_channel() {
        let mut b = NetworkBuilder::new(1, 4, 4, 2);
        let x = b.conv_bn_relu(0, 3, 3, 1, 1, false).unwrap();
        let x = b.max_pool(x, 2, 2, 0).unwrap();
        let d = b.dense(x, 2).unwrap();
        let net = b.finish(d).unwrap();
        let pruned = apply_plan(&net, &plan(vec![LayerPlan::from_prune(1, 3, [0])])).unwrap();
        let dense_id = pruned.output_id() - 1;
        match &pruned.nodes()[dense_id].layer {
            Layer::Dense(p) => assert_eq!(p.in_features, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pruning_a_conv_pinned_by_an_add_is_a_plan_error() {
        let mut b = NetworkBuilder::new(2, 4, 4, 2);
        let c = b.conv(0, 2, 3, 1, 1, false).unwrap();
        let s = b.add(c, 0).unwrap();
        let p = b.global_avg_pool(s).unwrap();
        let d = b.dense(p, 2).unwrap();
        let net = b.finish(d).unwrap();
        assert!(!net.nodes()[c].prunable);
        let err = apply_plan(&net, &plan(vec![LayerPlan::from_prune(c, 2, [1])])).unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
    }

    #[test]
    fn wrong_width_is_a_consistency_error() {
        let net = two_convs();
        let err = apply_plan(&net, &plan(vec![LayerPlan::from_prune(1, 6, [0])])).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }
}
