//! FLOPs and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP. Only convolutions and dense
//! layers cost FLOPs; pooling, ReLU, batchnorm, add and concat are free.
//! Parameters are conv and dense weights, their biases, and the two affine
//! vectors of each batchnorm (running statistics are buffers, not parameters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, Network, NodeId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub layer_id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_dims: [usize; 3],
    pub total_flops: u64,
    pub total_params: u64,
    pub layers: Vec<LayerComplexity>,
}

pub fn count_complexity(net: &Network) -> ComplexityReport {
    let extents = net.extents().expect("validated network has consistent extents");
    let mut layers = Vec::new();
    for node in net.nodes() {
        let (flops, params) = match &node.layer {
            Layer::Conv(c) => {
                let f = &c.filters;
                let [_, ho, wo] = extents[node.id];
                let weights = (f.n_out() * f.n_in() * f.kernel() * f.kernel()) as u64;
                let bias = f.bias().map_or(0, |b| b.len()) as u64;
                (weights * (ho * wo) as u64, weights + bias)
            }
            Layer::Dense(p) => {
                let weights = (p.in_features * p.out_features) as u64;
                (weights, weights + p.out_features as u64)
            }
            Layer::BatchNorm(p) => (0, 2 * p.channels() as u64),
            _ => continue,
        };
        layers.push(LayerComplexity {
            layer_id: node.id,
            name: node.name.clone(),
            kind: node.layer.kind(),
            flops,
            params,
        });
    }
    ComplexityReport {
        input_dims: net.input_dims(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        layers,
    }
}

impl ComplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Percent reductions, `(1 − after/before) · 100`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub flops_pr: f64,
    pub params_pr: f64,
}

pub fn reduction_report(before: &ComplexityReport, after: &ComplexityReport) -> Result<Reduction> {
    if before.total_flops == 0 || before.total_params == 0 {
        return Err(Error::Numeric("reference report has zero FLOPs or parameters".into()));
    }
    if before.input_dims != after.input_dims {
        return Err(Error::Consistency(format!(
            "reports were computed for different inputs {:?} and {:?}",
            before.input_dims, after.input_dims
        )));
    }
    let pr = |b: u64, a: u64| (1.0 - a as f64 / b as f64) * 100.0;
    Ok(Reduction {
        flops_pr: pr(before.total_flops, after.total_flops),
        params_pr: pr(before.total_params, after.total_params),
    })
}

/// `313733632` → `"313.73M"`.
pub fn format_count(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.2}B", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        n.to_string()
    }
}
