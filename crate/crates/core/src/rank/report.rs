use std::fmt::Write as _;

use serde::Serialize;

use super::RankStats;
use crate::graph::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankRow {
    pub layer_id: NodeId,
    pub filter_idx: usize,
    pub rank_sum: u64,
    pub g: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer_id: NodeId,
    pub filters: usize,
    pub g: usize,
    pub map_dims: [usize; 2],
    pub min_mean: f64,
    pub max_mean: f64,
    pub avg_mean: f64,
    /// Filter counts per unit-wide bin of mean rank, `[0, 1), [1, 2), …`, up to `min(h, w)`.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RankReport {
    pub layers: Vec<LayerSummary>,
    pub rows: Vec<RankRow>,
}

pub fn rank_report(stats: &[RankStats]) -> RankReport {
    let mut report = RankReport::default();
    for s in stats {
        let means = s.means();
        let side = s.map_dims[0].min(s.map_dims[1]);
        let mut histogram = vec![0; side + 1];
        for &m in &means {
            histogram[(m.floor() as usize).min(side)] += 1;
        }
        let (min_mean, max_mean) = means
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
        report.layers.push(LayerSummary {
            layer_id: s.layer_id,
            filters: means.len(),
            g: s.g_used,
            map_dims: s.map_dims,
            min_mean: if means.is_empty() { 0.0 } else { min_mean },
            max_mean: if means.is_empty() { 0.0 } else { max_mean },
            avg_mean: means.iter().sum::<f64>() / means.len().max(1) as f64,
            histogram,
        });
        report.rows.extend(means.iter().enumerate().map(|(j, &mean)| RankRow {
            layer_id: s.layer_id,
            filter_idx: j,
            rank_sum: s.per_filter_rank_sum[j],
            g: s.g_used,
            mean,
        }));
    }
    report
}

impl RankReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,filter_idx,rank_sum,g,mean\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:.2}", r.layer_id, r.filter_idx, r.rank_sum, r.g, r.mean);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>7} {:>5} {:>7} {:>8} {:>8} {:>8}  histogram",
            "layer", "filters", "g", "map", "min", "mean", "max"
        );
        for l in &self.layers {
            let hist: Vec<String> = l.histogram.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{:>6} {:>7} {:>5} {:>7} {:>8.2} {:>8.2} {:>8.2}  {}",
                l.layer_id,
                l.filters,
                l.g,
                format!("{}x{}", l.map_dims[0], l.map_dims[1]),
                l.min_mean,
                l.avg_mean,
                l.max_mean,
                hist.join(" ")
            );
        }
        out
    }
}
