mod common;

use common::rng;
use hrank::data::{InMemory, Synthetic, SyntheticConfig};
use hrank::graph::{Network, NetworkBuilder};
use hrank::rank::{estimate_ranks, CapturePoint, RankConfig, RankSet};
use hrank::tensor::Tensor4;
use rand::Rng;

/// Images whose three channels are independent rank-one outer products.
fn rank_one_channels(n: usize, side: usize, seed: u64) -> InMemory {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * 3 * side * side);
    for _ in 0..n {
        for _ in 0..3 {
            let u: Vec<f64> = (0..side).map(|_| r.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..side).map(|_| r.random_range(-1.0..1.0)).collect();
            for y in 0..side {
                for x in 0..side {
                    data.push(u[y] * v[x]);
                }
            }
        }
    }
    let labels = (0..n).map(|i| i % 2).collect();
    InMemory::new(Tensor4::from_vec([n, 3, side, side], data).unwrap(), labels, 2).unwrap()
}

/// A 1×1 conv where filter `j` mixes the first `j % 3 + 1` input channels,
/// so its maps have rank exactly `j % 3 + 1`.
fn mixing_net(filters: usize, side: usize) -> Network {
    let mut b = NetworkBuilder::new(3, side, side, 0);
    let c = b.conv(0, filters, 1, 1, 0, false).unwrap();
    let p = b.global_avg_pool(c).unwrap();
    let d = b.dense(p, 2).unwrap();
    let mut net = b.finish(d).unwrap();
    let mut r = rng(1);
    let f = &mut net.conv_mut(c).unwrap().filters;
    for j in 0..filters {
        let used = j % 3 + 1;
        for (k, w) in f.filter_mut(j).iter_mut().enumerate() {
            *w = if k < used { r.random_range(0.5..1.5) } else { 0.0 };
        }
    }
    net
}

#[test]
fn planted_feature_map_ranks_are_recovered() {
    let (g, side) = (30, 10);
    let net = mixing_net(7, side);
    let src = rank_one_channels(40, side, 2);
    let cfg = RankConfig {
        g,
        batch_size: 8,
        capture_point: CapturePoint::PostConv,
        ..RankConfig::default()
    };
    let set = estimate_ranks(&net, &src, &cfg).unwrap();
    assert_eq!(set.layers.len(), 1);
    let s = &set.layers[0];
    assert_eq!(s.g_used, g);
    assert_eq!(s.map_dims, [side, side]);
    let expected: Vec<u64> = (0..7).map(|j| (g * (j % 3 + 1)) as u64).collect();
    assert_eq!(s.per_filter_rank_sum, expected);
}

fn synthetic_stats(batch_size: usize) -> RankSet {
    let net = common::small_convnet([3, 8, 8], &[6, 6], 10, 4);
    let src = Synthetic::new(SyntheticConfig::new(10, 100).dims([3, 8, 8]).seed(4)).unwrap();
    estimate_ranks(
        &net,
        &src,
        &RankConfig {
            g: 37,
            batch_size,
            ..RankConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn batching_and_thread_count_do_not_change_the_sums() {
    let a = synthetic_stats(5);
    let b = synthetic_stats(37);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = single.install(|| synthetic_stats(13));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.to_json(), c.to_json());
}

#[test]
fn sums_respect_the_rank_ceiling() {
    let set = synthetic_stats(10);
    for s in &set.layers {
        s.validate().unwrap();
        assert!(s.per_filter_rank_sum.iter().all(|&x| x <= 37 * 8));
    }
    assert_eq!(RankSet::from_json(&set.to_json()).unwrap(), set);
}

#[test]
fn zero_g_is_a_usage_error() {
    let net = mixing_net(3, 6);
    let src = rank_one_channels(5, 6, 0);
    let err = estimate_ranks(&net, &src, &RankConfig { g: 0, ..RankConfig::default() }).unwrap_err();
    assert!(err.is_usage());
    let err = estimate_ranks(&net, &src, &RankConfig { g: 6, ..RankConfig::default() }).unwrap_err();
    assert!(matches!(err, hrank::Error::Data(_)));
}
