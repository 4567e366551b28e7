//! Reference implementations the library is checked against. None of them
//! call into the code paths they verify.
#![allow(dead_code)]

use hrank::graph::{Layer, Network, NodeId};
use hrank::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact rank by fraction-free (Bareiss) elimination over the integers.
pub fn exact_rank(rows: &[Vec<i64>]) -> usize {
    let mut a: Vec<Vec<i128>> = rows.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    let (m, n) = (a.len(), a.first().map_or(0, Vec::len));
    let mut rank = 0;
    let mut prev = 1i128;
    for col in 0..n {
        let Some(p) = (rank..m).find(|&r| a[r][col] != 0) else {
            continue;
        };
        a.swap(rank, p);
        for r in rank + 1..m {
            for c in col + 1..n {
                let num = a[rank][col] * a[r][c] - a[r][col] * a[rank][c];
                assert_eq!(num % prev, 0, "Bareiss division must be exact");
                a[r][c] = num / prev;
            }
            a[r][col] = 0;
        }
        prev = a[rank][col];
        rank += 1;
        if rank == m {
            break;
        }
    }
    rank
}

/// Integer matrix with entries in `[-5, 5]` whose rows span a planted
/// `rank`-dimensional space: `rank` base rows with small entries, the rest
/// signed copies or sums of base rows that stay in range, rows shuffled.
pub fn planted_rank_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> Vec<Vec<i64>> {
    let base: Vec<Vec<i64>> = (0..rank)
        .map(|_| (0..cols).map(|_| rng.random_range(-2..=2)).collect())
        .collect();
    let mut out = base.clone();
    while out.len() < rows {
        if base.is_empty() {
            out.push(vec![0; cols]);
            continue;
        }
        let a = &base[rng.random_range(0..base.len())];
        let b = &base[rng.random_range(0..base.len())];
        let (sa, sb) = (if rng.random_bool(0.5) { 1 } else { -1 }, rng.random_range(-1..=1));
        let combo: Vec<i64> = a.iter().zip(b).map(|(x, y)| sa * x + sb * y).collect();
        if combo.iter().all(|v| v.abs() <= 5) {
            out.push(combo);
        } else {
            out.push(a.iter().map(|x| sa * x).collect());
        }
    }
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Gives every batchnorm non-trivial statistics and affine parameters.
pub fn randomize_batchnorms(net: &mut Network, rng: &mut ChaCha8Rng) {
    let ids: Vec<NodeId> = net
        .nodes()
        .iter()
        .filter(|n| matches!(n.layer, Layer::BatchNorm(_)))
        .map(|n| n.id)
        .collect();
    for id in ids {
        let p = net.batchnorm_mut(id).unwrap();
        for c in 0..p.scale.len() {
            p.scale[c] = rng.random_range(0.5..1.5);
            p.shift[c] = rng.random_range(-0.2..0.2);
            p.mean[c] = rng.random_range(-0.2..0.2);
            p.var[c] = rng.random_range(0.5..2.0);
        }
    }
}

/// Zeroes filter `j` of `conv`, its batchnorm channel when the conv owns one,
/// and every downstream weight slice that reads the resulting channel. The
/// channel is followed through channelwise layers and concatenations until a
/// conv or dense layer consumes it.
pub fn zero_filter_and_consumers(net: &mut Network, conv: NodeId, j: usize) {
    {
        let f = &mut net.conv_mut(conv).unwrap().filters;
        f.filter_mut(j).iter_mut().for_each(|w| *w = 0.0);
        if let Some(b) = f.bias_mut() {
            b[j] = 0.0;
        }
    }
    let consumers: Vec<Vec<NodeId>> = {
        let mut c = vec![Vec::new(); net.nodes().len()];
        for n in net.nodes() {
            for &i in &n.inputs {
                c[i].push(n.id);
            }
        }
        c
    };
    if let [bn] = consumers[conv].as_slice() {
        if let Some(p) = net.batchnorm_mut(*bn) {
            p.scale[j] = 0.0;
            p.shift[j] = 0.0;
        }
    }
    let extents = net.extents().unwrap();
    let mut frontier = vec![(conv, j)];
    while let Some((node, ch)) = frontier.pop() {
        for &next in &consumers[node] {
            let layer = net.nodes()[next].layer.clone();
            match layer {
                Layer::Relu | Layer::BatchNorm(_) | Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::GlobalAvgPool => {
                    frontier.push((next, ch))
                }
                Layer::Concat => {
                    let inputs = net.nodes()[next].inputs.clone();
                    let mut offset = 0;
                    for &i in &inputs {
                        if i == node {
                            frontier.push((next, offset + ch));
                        }
                        offset += extents[i][0];
                    }
                }
                Layer::Conv(_) => {
                    let f = &mut net.conv_mut(next).unwrap().filters;
                    let k2 = f.kernel() * f.kernel();
                    for o in 0..f.n_out() {
                        f.filter_mut(o)[ch * k2..(ch + 1) * k2].iter_mut().for_each(|w| *w = 0.0);
                    }
                }
                Layer::Dense(_) => {
                    let [_, h, w] = extents[node];
                    let p = net.dense_mut(next).unwrap();
                    let inf = p.in_features;
                    for o in 0..p.out_features {
                        p.weights[o * inf + ch * h * w..o * inf + (ch + 1) * h * w]
                            .iter_mut()
                            .for_each(|v| *v = 0.0);
                    }
                }
                other => panic!("zeroed channel reaches {other:?} at node {next}"),
            }
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor that keeps all-zero pairs at zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain conv-bn-relu stack: one 2×2 max-pool after the first conv, dense head on the flattened maps.
pub fn small_convnet(dims: [usize; 3], widths: &[usize], classes: usize, seed: u64) -> Network {
    let [c, h, w] = dims;
    let mut b = hrank::graph::NetworkBuilder::new(c, h, w, seed);
    let mut x = b.input();
    for (i, &n) in widths.iter().enumerate() {
        x = b.conv_bn_relu(x, n, 3, 1, 1, false).unwrap();
        if i == 0 {
            x = b.max_pool(x, 2, 2, 0).unwrap();
        }
    }
    let d = b.dense(x, classes).unwrap();
    b.finish(d).unwrap()
}
