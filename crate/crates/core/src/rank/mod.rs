//! Feature-map rank statistics.
//!
//! For every prunable convolution the statistic of filter `j` is the sum, over
//! the sampled images, of the numerical rank of that image's `j`-th output
//! channel. Sums are integers, so the parallel reduction is order-independent
//! and results do not depend on thread scheduling.

mod report;
pub mod svd;

pub use report::{rank_report, LayerSummary, RankReport, RankRow};
pub use svd::{numerical_rank, singular_values, svd, Matrix, Svd, TolerancePolicy};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSource};
use crate::error::{Error, Result};
use crate::graph::{Network, NodeId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    /// After the convolution's own batchnorm and ReLU.
    #[default]
    PostBlock,
    /// Raw convolution output.
    PostConv,
}

impl CapturePoint {
    pub fn as_str(self) -> &'static str {
        match self {
            CapturePoint::PostBlock => "post_block",
            CapturePoint::PostConv => "post_conv",
        }
    }
}

impl std::str::FromStr for CapturePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_block" => Ok(CapturePoint::PostBlock),
            "post_conv" => Ok(CapturePoint::PostConv),
            other => Err(Error::Usage(format!(
                "unknown capture point {other:?} (expected post_block or post_conv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub layer_id: NodeId,
    pub per_filter_rank_sum: Vec<u64>,
    pub g_used: usize,
    /// `(h, w)` of the captured maps.
    pub map_dims: [usize; 2],
    pub tolerance_policy: TolerancePolicy,
}

impl RankStats {
    pub fn filters(&self) -> usize {
        self.per_filter_rank_sum.len()
    }

    pub fn mean(&self, filter: usize) -> f64 {
        self.per_filter_rank_sum[filter] as f64 / self.g_used as f64
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.filters()).map(|j| self.mean(j)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_used == 0 {
            return Err(Error::Consistency(format!("layer {}: g_used is zero", self.layer_id)));
        }
        let cap = self.g_used as u64 * self.map_dims[0].min(self.map_dims[1]) as u64;
        if let Some(j) = self.per_filter_rank_sum.iter().position(|&s| s > cap) {
            return Err(Error::Consistency(format!(
                "layer {} filter {j}: rank sum {} exceeds g * min(h, w) = {cap}",
                self.layer_id, self.per_filter_rank_sum[j]
            )));
        }
        Ok(())
    }
}

/// Statistics for one network, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSet {
    pub model_fingerprint: String,
    pub capture_point: CapturePoint,
    pub source: String,
    pub seed: u64,
    pub layers: Vec<RankStats>,
}

impl RankSet {
    pub fn layer(&self, id: NodeId) -> Option<&RankStats> {
        self.layers.iter().find(|s| s.layer_id == id)
    }

    /// Digest of the canonical serialization; plans and masks carry it.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint::digest(&serde_json::to_vec(self).expect("stats serialize"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: RankSet = serde_json::from_str(text).map_err(|e| Error::format("rank stats", e.to_string()))?;
        for s in &set.layers {
            s.validate()?;
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankConfig {
    pub g: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub capture_point: CapturePoint,
    pub tolerance: TolerancePolicy,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            g: 500,
            batch_size: 50,
            seed: 0,
            capture_point: CapturePoint::default(),
            tolerance: TolerancePolicy::default(),
        }
    }
}

/// Samples `cfg.g` images from `src` and accumulates rank statistics for every
/// prunable convolution of `net`.
pub fn estimate_ranks(net: &Network, src: &dyn DatasetSource, cfg: &RankConfig) -> Result<RankSet> {
    if cfg.g == 0 {
        return Err(Error::Usage("g must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    if src.image_dims() != net.input_dims() {
        return Err(Error::Shape(format!(
            "source images {:?} do not match network input {:?}",
            src.image_dims(),
            net.input_dims()
        )));
    }
    let sample = data::sample(src, cfg.g, cfg.seed)?;
    let mut acc = RankAccumulator::new(net, cfg.capture_point, cfg.tolerance);
    for batch in sample.batches(cfg.batch_size) {
        acc.add_batch(&batch.images)?;
    }
    Ok(RankSet {
        model_fingerprint: net.fingerprint(),
        capture_point: cfg.capture_point,
        source: src.describe(),
        seed: cfg.seed,
        layers: acc.finish(),
    })
}

/// Incremental form of [`estimate_ranks`] for callers that bring their own batches.
pub struct RankAccumulator<'a> {
    net: &'a Network,
    policy: TolerancePolicy,
    /// `(conv id, captured node id)` per prunable layer.
    targets: Vec<(NodeId, NodeId)>,
    sums: BTreeMap<NodeId, Vec<u64>>,
    map_dims: BTreeMap<NodeId, [usize; 2]>,
    images: usize,
}

impl<'a> RankAccumulator<'a> {
    pub fn new(net: &'a Network, capture: CapturePoint, policy: TolerancePolicy) -> Self {
        let targets = net
            .prunable_conv_ids()
            .into_iter()
            .map(|id| match capture {
                CapturePoint::PostConv => (id, id),
                CapturePoint::PostBlock => (id, net.block_output(id)),
            })
            .collect();
        RankAccumulator {
            net,
            policy,
            targets,
            sums: BTreeMap::new(),
            map_dims: BTreeMap::new(),
            images: 0,
        }
    }

    pub fn add_batch(&mut self, images: &crate::tensor::Tensor4) -> Result<()> {
        let capture: Vec<NodeId> = self.targets.iter().map(|&(_, node)| node).collect();
        let out = self.net.forward_nodes(images, &capture)?;
        let g = images.images();
        for &(conv, node) in &self.targets {
            let maps = &out.captured[&node];
            let (c, h, w) = (maps.channels(), maps.height(), maps.width());
            let jobs: Vec<(usize, usize)> = (0..g).flat_map(|n| (0..c).map(move |j| (n, j))).collect();
            let ranks: Vec<Result<(usize, usize)>> = jobs
                .par_iter()
                .map(|&(n, j)| {
                    let m = Matrix::new(h, w, maps.plane(n, j).to_vec())?;
                    numerical_rank(&m, self.policy).map(|r| (j, r))
                })
                .collect();
            let sums = self.sums.entry(conv).or_insert_with(|| vec![0; c]);
            for r in ranks {
                let (j, r) = r.map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("layer {conv}: {msg}")),
                    other => other,
                })?;
                sums[j] += r as u64;
            }
            self.map_dims.insert(conv, [h, w]);
        }
        self.images += g;
        Ok(())
    }

    pub fn finish(self) -> Vec<RankStats> {
        self.targets
            .iter()
            .map(|&(conv, _)| RankStats {
                layer_id: conv,
                per_filter_rank_sum: self.sums.get(&conv).cloned().unwrap_or_default(),
                g_used: self.images,
                map_dims: self.map_dims.get(&conv).copied().unwrap_or([0, 0]),
                tolerance_policy: self.policy,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InMemory;
    use crate::graph::NetworkBuilder;
    use crate::tensor::Tensor4;

    /// One 1×1 conv with two filters: filter 0 is zero, filter 1 copies channel 0.
    fn toy() -> Network {
        let mut b = NetworkBuilder::new(1, 4, 4, 0);
        let c = b.conv(0, 2, 1, 1, 0, false).unwrap();
        let p = b.global_avg_pool(c).unwrap();
        let d = b.dense(p, 2).unwrap();
        let mut net = b.finish(d).unwrap();
        let f = &mut net.conv_mut(c).unwrap().filters;
        f.weights_mut().copy_from_slice(&[0.0, 1.0]);
        net
    }

    fn rank2_images(g: usize) -> InMemory {
        let mut data = vec![0.0; g * 16];
        for n in 0..g {
            // diag(1, 2, 0, 0) scaled per image
            data[n * 16] = 1.0 + n as f64;
            data[n * 16 + 5] = 2.0;
        }
        InMemory::new(Tensor4::from_vec([g, 1, 4, 4], data).unwrap(), vec![0; g], 2).unwrap()
    }

    #[test]
    fn sums_follow_the_definition() {
        let cfg = RankConfig {
            g: 3,
            batch_size: 2,
            capture_point: CapturePoint::PostConv,
            ..RankConfig::default()
        };
        let set = estimate_ranks(&toy(), &rank2_images(3), &cfg).unwrap();
        assert_eq!(set.layers.len(), 1);
        assert_eq!(set.layers[0].per_filter_rank_sum, vec![0, 6]);
        assert_eq!(set.layers[0].g_used, 3);
        assert_eq!(set.layers[0].map_dims, [4, 4]);
    }

    #[test]
    fn batch_size_does_not_change_sums() {
        let src = rank2_images(5);
        let run = |bs| {
            let cfg = RankConfig {
                g: 5,
                batch_size: bs,
                ..RankConfig::default()
            };
            estimate_ranks(&toy(), &src, &cfg).unwrap()
        };
        assert_eq!(run(1), run(5));
    }

    #[test]
    fn oversized_g_is_a_data_error() {
        let cfg = RankConfig {
            g: 4,
            ..RankConfig::default()
        };
        assert!(matches!(estimate_ranks(&toy(), &rank2_images(3), &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn zero_g_is_a_usage_error() {
        let cfg = RankConfig {
            g: 0,
            ..RankConfig::default()
        };
        assert!(estimate_ranks(&toy(), &rank2_images(3), &cfg).unwrap_err().is_usage());
    }

    #[test]
    fn json_round_trip_keeps_fingerprint() {
        let set = estimate_ranks(&toy(), &rank2_images(3), &RankConfig { g: 3, ..Default::default() }).unwrap();
        let back = RankSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back.fingerprint(), set.fingerprint());
    }
}
