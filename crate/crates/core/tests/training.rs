mod common;

use common::small_convnet;
use hrank::data::{gather, Synthetic, SyntheticConfig};
use hrank::graph::{Layer, Network, NetworkBuilder, StructureKind};
use hrank::planner::{build_freeze_mask, build_plan, FreezeMask, PruneRateConfig};
use hrank::rank::{estimate_ranks, RankConfig};
use hrank::surgeon::apply_plan;
use hrank::trainer::{
    evaluate, prune_finetune_schedule, run_schedule, softmax_cross_entropy, train, OptimizerState, ScheduleMode,
    TrainConfig,
};
use hrank::data::DatasetSource;

const DIMS: [usize; 3] = [3, 8, 8];

fn data(n: usize, seed: u64) -> Synthetic {
    Synthetic::new(SyntheticConfig::new(10, n).dims(DIMS).seed(seed)).unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr_drop_epochs: vec![],
        seed,
        ..TrainConfig::default()
    }
}

fn mean_loss(net: &Network, src: &dyn DatasetSource) -> f64 {
    let idx: Vec<usize> = (0..src.len()).collect();
    let b = gather(src, &idx);
    softmax_cross_entropy(&net.forward(&b.images, &[]).unwrap().logits, &b.labels).0
}

fn conv_weights(net: &Network) -> Vec<Vec<u64>> {
    net.conv_ids()
        .into_iter()
        .map(|id| net.conv(id).unwrap().filters.weights().iter().map(|w| w.to_bits()).collect())
        .collect()
}

#[test]
fn zero_epochs_return_the_same_network() {
    let net = small_convnet(DIMS, &[4, 4], 10, 1);
    let out = train(&net, &FreezeMask::none(), &data(50, 1), &quick(0, 1)).unwrap();
    assert_eq!(out.net, net);
    assert!(out.trajectory.is_empty());
}

#[test]
fn fully_frozen_convs_stay_put_while_the_head_learns() {
    let net = small_convnet(DIMS, &[4, 4], 10, 2);
    let out = train(&net, &FreezeMask::all_frozen(&net), &data(100, 2), &quick(2, 2)).unwrap();
    assert_eq!(conv_weights(&out.net), conv_weights(&net));
    for id in net.conv_ids() {
        let bn = net.owned_batchnorm(id).unwrap();
        assert_eq!(out.net.nodes()[bn].layer, net.nodes()[bn].layer);
    }
    let head = |n: &Network| match &n.nodes()[n.output_id() - 1].layer {
        Layer::Dense(p) => p.weights.clone(),
        other => panic!("{other:?}"),
    };
    assert_ne!(head(&out.net), head(&net));
}

#[test]
fn partial_freeze_keeps_frozen_filters_bit_identical() {
    let src = data(120, 3);
    let net = small_convnet(DIMS, &[6, 6], 10, 3);
    let stats = estimate_ranks(&net, &src, &RankConfig { g: 40, ..RankConfig::default() }).unwrap();
    let plan = build_plan(&stats, &PruneRateConfig::uniform(0.0), "hrank", 0).unwrap();
    for fraction in [0.2, 0.5, 0.9] {
        let mask = build_freeze_mask(&plan, &stats, fraction).unwrap();
        assert!(mask.total_frozen() > 0);
        let out = train(&net, &mask, &src, &quick(2, 3)).unwrap();
        for (&id, frozen) in &mask.layers {
            let (a, b) = (&net.conv(id).unwrap().filters, &out.net.conv(id).unwrap().filters);
            for j in 0..a.n_out() {
                let same = a.filter(j).iter().zip(b.filter(j)).all(|(x, y)| x.to_bits() == y.to_bits());
                assert_eq!(same, frozen.contains(&j), "layer {id} filter {j}");
            }
        }
    }
}

#[test]
fn tiny_net_fits_separable_data() {
    let src = data(500, 4);
    let net = small_convnet(DIMS, &[8, 8], 10, 4);
    let out = train(&net, &FreezeMask::none(), &src, &quick(10, 4)).unwrap();
    let acc = evaluate(&out.net, &src).unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn random_weights_are_near_chance() {
    let src = data(500, 5);
    for seed in 0..8 {
        let acc = evaluate(&small_convnet(DIMS, &[8, 8], 10, seed), &src).unwrap();
        assert!((0.02..=0.25).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn first_epoch_lowers_the_loss_with_default_hyperparameters() {
    for seed in 0..5 {
        let src = data(512, 10 + seed);
        let net = small_convnet(DIMS, &[8, 8], 10, seed);
        let cfg = TrainConfig {
            epochs: 1,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&net, &FreezeMask::none(), &src, &cfg).unwrap();
        assert!(mean_loss(&out.net, &src) < mean_loss(&net, &src), "seed {seed}");
    }
}

#[test]
fn training_is_deterministic() {
    let src = data(100, 6);
    let net = small_convnet(DIMS, &[4, 4], 10, 6);
    let a = train(&net, &FreezeMask::none(), &src, &quick(2, 9)).unwrap();
    let b = train(&net, &FreezeMask::none(), &src, &quick(2, 9)).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.optimizer, b.optimizer);
    let c = train(&net, &FreezeMask::none(), &src, &quick(2, 10)).unwrap();
    assert_ne!(a.net, c.net);
}

#[test]
fn optimizer_state_round_trips() {
    let src = data(60, 7);
    let net = small_convnet(DIMS, &[4, 4], 10, 7);
    let out = train(&net, &FreezeMask::none(), &src, &quick(1, 7)).unwrap();
    let bytes = out.optimizer.encode();
    assert_eq!(OptimizerState::decode(&bytes).unwrap(), out.optimizer);
    let mut bad = bytes.clone();
    bad[40] ^= 1;
    assert!(OptimizerState::decode(&bad).is_err());
}

#[test]
fn per_layer_schedule_has_one_stage_per_layer() {
    let src = data(60, 8);
    let net = small_convnet(DIMS, &[4, 6, 6], 10, 8);
    let stats = estimate_ranks(&net, &src, &RankConfig { g: 20, ..RankConfig::default() }).unwrap();
    let out =
        prune_finetune_schedule(&net, &stats, &PruneRateConfig::uniform(0.5), &src, &quick(1, 8), ScheduleMode::PerLayer)
            .unwrap();
    assert_eq!(out.stages.len(), 3);
    for (stage, id) in out.stages.iter().zip(net.prunable_conv_ids()) {
        assert_eq!(stage.layers, vec![id]);
    }
    for id in net.prunable_conv_ids() {
        let n = net.conv(id).unwrap().filters.n_out();
        assert_eq!(out.net.conv(id).unwrap().filters.n_out(), n - n / 2);
    }
}

fn two_block_residual(seed: u64) -> Network {
    let mut b = NetworkBuilder::new(3, 8, 8, seed);
    let mut x = b.conv_bn_relu(0, 4, 3, 1, 1, false).unwrap();
    for i in 0..2 {
        b.begin_block(StructureKind::Residual, format!("res{i}"));
        let y = b.conv_bn_relu(x, 4, 3, 1, 1, false).unwrap();
        let y = b.conv(y, 4, 3, 1, 1, false).unwrap();
        let y = b.batch_norm(y).unwrap();
        let s = b.add(y, x).unwrap();
        x = b.relu(s).unwrap();
        b.end_block();
    }
    let p = b.global_avg_pool(x).unwrap();
    let d = b.dense(p, 10).unwrap();
    b.finish(d).unwrap()
}

#[test]
fn per_block_schedule_partitions_the_prunable_layers() {
    let src = data(60, 9);
    let net = two_block_residual(9);
    let stats = estimate_ranks(&net, &src, &RankConfig { g: 20, ..RankConfig::default() }).unwrap();
    let out =
        prune_finetune_schedule(&net, &stats, &PruneRateConfig::uniform(0.5), &src, &quick(1, 9), ScheduleMode::PerBlock)
            .unwrap();
    assert_eq!(out.stages.len(), 2);
    let mut covered: Vec<usize> = out.stages.iter().flat_map(|s| s.layers.clone()).collect();
    assert!(out.stages[0].layers.iter().all(|l| !out.stages[1].layers.contains(l)));
    covered.sort_unstable();
    assert_eq!(covered, net.prunable_conv_ids());
}

#[test]
fn one_shot_equals_prune_then_train() {
    let src = data(60, 10);
    let net = small_convnet(DIMS, &[4, 6], 10, 10);
    let stats = estimate_ranks(&net, &src, &RankConfig { g: 20, ..RankConfig::default() }).unwrap();
    let plan = build_plan(&stats, &PruneRateConfig::uniform(0.5), "hrank", 0).unwrap();
    let cfg = quick(2, 10);
    let scheduled = run_schedule(&net, &plan, &src, &cfg, ScheduleMode::OneShot).unwrap();
    let direct = train(&apply_plan(&net, &plan).unwrap(), &FreezeMask::none(), &src, &cfg).unwrap();
    assert_eq!(scheduled.stages.len(), 1);
    assert_eq!(scheduled.net, direct.net);
}

#[test]
fn every_preset_trains_from_its_initial_weights() {
    let src = Synthetic::new(SyntheticConfig::new(10, 32).seed(9)).unwrap();
    for name in hrank::graph::PresetRegistry::with_defaults().names() {
        let net = hrank::graph::build_preset(name, &hrank::graph::PresetOptions::new(10).width(0.25).seed(9)).unwrap();
        let cfg = TrainConfig { batch_size: 16, ..quick(1, 9) };
        let out = train(&net, &FreezeMask::none(), &src, &cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(out.trajectory[0].loss.is_finite(), "{name}");
    }
}
