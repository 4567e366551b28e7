//! Keep/prune partitions from rank statistics, and freeze masks for fine-tuning.
//!
//! Planning is layer-local: every layer gets its own prune budget and the
//! selection for one layer never looks at another.

pub mod strategy;

pub use strategy::{SelectionContext, SelectionStrategy, StrategyRegistry};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Network, NodeId};
use crate::rank::{RankSet, RankStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerRate {
    Count { n_prune: usize },
    Rate { rate: f64 },
}

impl LayerRate {
    /// Number of filters to remove from a layer of `n` filters.
    pub fn n_prune(&self, layer: NodeId, n: usize) -> Result<usize> {
        let k = match *self {
            LayerRate::Count { n_prune } => n_prune,
            LayerRate::Rate { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("layer {layer}: rate {rate} is outside [0, 1)")));
                }
                (rate * n as f64).floor() as usize
            }
        };
        if k >= n {
            return Err(Error::Config(format!(
                "layer {layer}: pruning {k} of {n} filters would leave none"
            )));
        }
        Ok(k)
    }
}

/// Per-layer budgets. Layers without an entry use `default`, or are left intact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneRateConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
    #[serde(default)]
    pub layers: BTreeMap<NodeId, LayerRate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PruneRateConfig {
    pub fn uniform(rate: f64) -> Self {
        PruneRateConfig {
            default: Some(rate),
            ..Self::default()
        }
    }

    pub fn with_layer(mut self, layer: NodeId, rate: LayerRate) -> Self {
        self.layers.insert(layer, rate);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("rates", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rates serialize")
    }

    fn rate_for(&self, layer: NodeId) -> LayerRate {
        self.layers
            .get(&layer)
            .copied()
            .unwrap_or(LayerRate::Rate {
                rate: self.default.unwrap_or(0.0),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: NodeId,
    pub n_filters: usize,
    pub keep: Vec<usize>,
    pub prune: Vec<usize>,
}

impl LayerPlan {
    pub fn from_prune(layer_id: NodeId, n_filters: usize, prune: impl IntoIterator<Item = usize>) -> Self {
        let prune: BTreeSet<usize> = prune.into_iter().collect();
        LayerPlan {
            layer_id,
            n_filters,
            keep: (0..n_filters).filter(|j| !prune.contains(j)).collect(),
            prune: prune.into_iter().collect(),
        }
    }

    pub fn n_keep(&self) -> usize {
        self.keep.len()
    }

    pub fn n_prune(&self) -> usize {
        self.prune.len()
    }

    /// Partition laws: disjoint, covering, sorted, at least one survivor.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Consistency(format!("layer {}: {m}", self.layer_id)));
        let sorted_unique = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted_unique(&self.keep) || !sorted_unique(&self.prune) {
            return bad("index lists must be strictly ascending".into());
        }
        if self.keep.is_empty() {
            return bad("every filter is pruned".into());
        }
        if self.n_keep() + self.n_prune() != self.n_filters {
            return bad(format!(
                "{} kept + {} pruned != {} filters",
                self.n_keep(),
                self.n_prune(),
                self.n_filters
            ));
        }
        let mut seen = vec![false; self.n_filters];
        for &j in self.keep.iter().chain(&self.prune) {
            if j >= self.n_filters || std::mem::replace(&mut seen[j], true) {
                return bad(format!("filter {j} is out of range or listed twice"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub stats_fingerprint: String,
    pub model_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub provenance: Provenance,
    /// Ascending by layer id.
    pub layers: Vec<LayerPlan>,
}

impl PruningPlan {
    pub fn empty(provenance: Provenance) -> Self {
        PruningPlan {
            provenance,
            layers: Vec::new(),
        }
    }

    pub fn layer(&self, id: NodeId) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(LayerPlan::n_prune).sum()
    }

    pub fn is_noop(&self) -> bool {
        self.total_pruned() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.windows(2).any(|w| w[0].layer_id >= w[1].layer_id) {
            return Err(Error::Consistency("plan layers must be listed once, by ascending id".into()));
        }
        self.layers.iter().try_for_each(LayerPlan::validate)
    }

    /// The sub-plan for the listed layers; other layers are left out.
    pub fn restrict(&self, layers: &[NodeId]) -> PruningPlan {
        PruningPlan {
            provenance: self.provenance.clone(),
            layers: self
                .layers
                .iter()
                .filter(|l| layers.contains(&l.layer_id))
                .cloned()
                .collect(),
        }
    }

    /// Union of two plans over disjoint layer sets.
    pub fn merge(&self, other: &PruningPlan) -> Result<PruningPlan> {
        let mut layers = self.layers.clone();
        for l in &other.layers {
            if self.layer(l.layer_id).is_some() {
                return Err(Error::Consistency(format!("layer {} appears in both plans", l.layer_id)));
            }
            layers.push(l.clone());
        }
        layers.sort_by_key(|l| l.layer_id);
        Ok(PruningPlan {
            provenance: self.provenance.clone(),
            layers,
        })
    }

    /// Checks that every pruned layer is a prunable conv of the right width.
    pub fn check_against(&self, net: &Network) -> Result<()> {
        self.validate()?;
        for l in &self.layers {
            let conv = net
                .conv(l.layer_id)
                .ok_or_else(|| Error::Consistency(format!("plan layer {} is not a convolution", l.layer_id)))?;
            if conv.filters.n_out() != l.n_filters {
                return Err(Error::Consistency(format!(
                    "plan layer {} expects {} filters, network has {}",
                    l.layer_id,
                    l.n_filters,
                    conv.filters.n_out()
                )));
            }
            if l.n_prune() > 0 && !net.nodes()[l.layer_id].prunable {
                return Err(Error::Plan(format!("layer {} is not prunable", l.layer_id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PruningPlan = serde_json::from_str(text).map_err(|e| Error::format("plan", e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

fn check_budget(stats: &RankStats, n_prune: usize) -> Result<()> {
    if n_prune >= stats.filters() {
        return Err(Error::Config(format!(
            "layer {}: pruning {n_prune} of {} filters would leave none",
            stats.layer_id,
            stats.filters()
        )));
    }
    Ok(())
}

/// Removes the `n_prune` filters with the smallest rank sums.
pub fn select_hrank(stats: &RankStats, n_prune: usize) -> Result<LayerPlan> {
    select_variant(stats, n_prune, "hrank", 0)
}

/// Any registered selection rule by name.
pub fn select_variant(stats: &RankStats, n_prune: usize, variant: &str, seed: u64) -> Result<LayerPlan> {
    let registry = StrategyRegistry::with_defaults();
    select_with(registry.get(variant)?, stats, n_prune, seed)
}

pub fn select_with(
    strategy: &dyn SelectionStrategy,
    stats: &RankStats,
    n_prune: usize,
    seed: u64,
) -> Result<LayerPlan> {
    check_budget(stats, n_prune)?;
    let ctx = SelectionContext {
        layer_id: stats.layer_id,
        seed,
    };
    let prune = strategy.select(&stats.per_filter_rank_sum, n_prune, ctx);
    let plan = LayerPlan::from_prune(stats.layer_id, stats.filters(), prune);
    debug_assert_eq!(plan.n_prune(), n_prune);
    Ok(plan)
}

pub fn build_plan(stats: &RankSet, rates: &PruneRateConfig, variant: &str, seed: u64) -> Result<PruningPlan> {
    build_plan_with(&StrategyRegistry::with_defaults(), stats, rates, variant, seed)
}

pub fn build_plan_with(
    registry: &StrategyRegistry,
    stats: &RankSet,
    rates: &PruneRateConfig,
    variant: &str,
    seed: u64,
) -> Result<PruningPlan> {
    let strategy = registry.get(variant)?;
    if let Some(&missing) = rates.layers.keys().find(|&&id| stats.layer(id).is_none()) {
        return Err(Error::Config(format!(
            "rates name layer {missing}, which is not a prunable layer of this model"
        )));
    }
    let mut layers = Vec::with_capacity(stats.layers.len());
    for s in &stats.layers {
        let n_prune = rates.rate_for(s.layer_id).n_prune(s.layer_id, s.filters())?;
        layers.push(select_with(strategy, s, n_prune, seed)?);
    }
    layers.sort_by_key(|l| l.layer_id);
    let plan = PruningPlan {
        provenance: Provenance {
            variant: variant.to_string(),
            seed: strategy.uses_seed().then_some(seed),
            stats_fingerprint: stats.fingerprint(),
            model_fingerprint: stats.model_fingerprint.clone(),
        },
        layers,
    };
    plan.validate()?;
    Ok(plan)
}

/// Filters excluded from updates during fine-tuning, indexed in the pruned
/// network (position within the layer's keep list).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub freeze_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_fingerprint: Option<String>,
    pub layers: BTreeMap<NodeId, Vec<usize>>,
}

impl FreezeMask {
    /// Everything trainable.
    pub fn none() -> Self {
        Self::default()
    }

    /// Every filter of every convolution frozen.
    pub fn all_frozen(net: &Network) -> Self {
        FreezeMask {
            freeze_fraction: 1.0,
            stats_fingerprint: None,
            layers: net
                .conv_ids()
                .into_iter()
                .map(|id| (id, (0..net.conv(id).expect("conv").filters.n_out()).collect()))
                .collect(),
        }
    }

    pub fn frozen(&self, layer: NodeId) -> &[usize] {
        self.layers.get(&layer).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_frozen(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    pub fn check_against(&self, net: &Network) -> Result<()> {
        for (&id, filters) in &self.layers {
            let n = net
                .conv(id)
                .ok_or_else(|| Error::Consistency(format!("mask layer {id} is not a convolution")))?
                .filters
                .n_out();
            if let Some(&j) = filters.iter().find(|&&j| j >= n) {
                return Err(Error::Consistency(format!("mask freezes filter {j} of layer {id}, which has {n}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("freeze mask", e.to_string()))
    }
}

/// Freezes, per layer, the `⌊fraction · n_keep⌋` kept filters with the highest
/// rank sums (ties freeze the smaller index).
pub fn build_freeze_mask(plan: &PruningPlan, stats: &RankSet, freeze_fraction: f64) -> Result<FreezeMask> {
    if !(0.0..1.0).contains(&freeze_fraction) {
        return Err(Error::Config(format!("freeze fraction {freeze_fraction} is outside [0, 1)")));
    }
    let fp = stats.fingerprint();
    if plan.provenance.stats_fingerprint != fp {
        return Err(Error::Consistency(format!(
            "plan was built from stats {} but these stats are {}",
            plan.provenance.stats_fingerprint, fp
        )));
    }
    let mut layers = BTreeMap::new();
    for l in &plan.layers {
        let s = stats
            .layer(l.layer_id)
            .ok_or_else(|| Error::Consistency(format!("no stats for plan layer {}", l.layer_id)))?;
        let n_freeze = (freeze_fraction * l.n_keep() as f64).floor() as usize;
        if n_freeze == 0 {
            continue;
        }
        let mut positions: Vec<usize> = (0..l.n_keep()).collect();
        positions.sort_by_key(|&p| (std::cmp::Reverse(s.per_filter_rank_sum[l.keep[p]]), l.keep[p]));
        let mut frozen: Vec<usize> = positions.into_iter().take(n_freeze).collect();
        frozen.sort_unstable();
        layers.insert(l.layer_id, frozen);
    }
    Ok(FreezeMask {
        freeze_fraction,
        stats_fingerprint: Some(fp),
        layers,
    })
}
