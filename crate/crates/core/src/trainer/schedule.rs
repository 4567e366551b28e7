use serde::{Deserialize, Serialize};

use super::{train, EpochRecord, TrainConfig};
use crate::data::DatasetSource;
use crate::error::{Error, Result};
use crate::graph::{Network, NodeId};
use crate::planner::{build_plan, FreezeMask, PruneRateConfig, PruningPlan};
use crate::rank::RankSet;
use crate::surgeon::{apply_plan, count_complexity, ComplexityReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Prune and retrain one layer at a time.
    PerLayer,
    /// Prune all layers of a structural block, then retrain.
    PerBlock,
    /// Prune everything, then retrain once.
    OneShot,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" => Ok(ScheduleMode::PerLayer),
            "per_block" => Ok(ScheduleMode::PerBlock),
            "one_shot" => Ok(ScheduleMode::OneShot),
            other => Err(Error::Usage(format!(
                "unknown schedule {other:?} (expected per_layer, per_block or one_shot)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub layers: Vec<NodeId>,
    pub filters_pruned: usize,
    pub complexity: ComplexityReport,
    pub trajectory: Vec<EpochRecord>,
}

pub struct ScheduleOutcome {
    pub net: Network,
    pub stages: Vec<StageReport>,
}

/// HRank plan from `stats` and `rates`, executed stage by stage.
pub fn prune_finetune_schedule(
    net: &Network,
    stats: &RankSet,
    rates: &PruneRateConfig,
    data: &dyn DatasetSource,
    cfg: &TrainConfig,
    mode: ScheduleMode,
) -> Result<ScheduleOutcome> {
    let plan = build_plan(stats, rates, "hrank", cfg.seed)?;
    run_schedule(net, &plan, data, cfg, mode)
}

/// Splits the plan's layers into stages (in topological order) and runs
/// `apply_plan` restricted to each stage followed by training. Node ids and
/// original filter indices survive surgery, so later stages apply unchanged.
pub fn run_schedule(
    net: &Network,
    plan: &PruningPlan,
    data: &dyn DatasetSource,
    cfg: &TrainConfig,
    mode: ScheduleMode,
) -> Result<ScheduleOutcome> {
    plan.check_against(net)?;
    let stages = stage_layers(net, plan, mode)?;
    let mut current = net.clone();
    let mut reports = Vec::with_capacity(stages.len());
    for layers in stages {
        let sub = plan.restrict(&layers);
        current = apply_plan(&current, &sub)?;
        let outcome = train(&current, &FreezeMask::none(), data, cfg)?;
        current = outcome.net;
        reports.push(StageReport {
            filters_pruned: sub.total_pruned(),
            complexity: count_complexity(&current),
            trajectory: outcome.trajectory,
            layers,
        });
    }
    Ok(ScheduleOutcome {
        net: current,
        stages: reports,
    })
}

fn stage_layers(net: &Network, plan: &PruningPlan, mode: ScheduleMode) -> Result<Vec<Vec<NodeId>>> {
    let ids: Vec<NodeId> = plan.layers.iter().map(|l| l.layer_id).collect();
    Ok(match mode {
        ScheduleMode::OneShot => vec![ids],
        ScheduleMode::PerLayer => ids.into_iter().map(|id| vec![id]).collect(),
        ScheduleMode::PerBlock => {
            if !ids.is_empty() && ids.iter().all(|&id| net.nodes()[id].block.is_none()) {
                return Err(Error::Config("per_block schedule needs a network with block annotations".into()));
            }
            let mut stages: Vec<(Option<usize>, Vec<NodeId>)> = Vec::new();
            for id in ids {
                let block = net.nodes()[id].block;
                match stages.iter_mut().find(|(b, _)| block.is_some() && *b == block) {
                    Some((_, layers)) => layers.push(id),
                    None => stages.push((block, vec![id])),
                }
            }
            stages.into_iter().map(|(_, layers)| layers).collect()
        }
    })
}
