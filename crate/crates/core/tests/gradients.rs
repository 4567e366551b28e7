mod common;

use common::{dot, numeric_gradient, random_tensor, randomize_batchnorms, relative_error, rng};
use hrank::graph::{Layer, Network, NetworkBuilder, NodeId, ParamGrad};
use hrank::tensor::Tensor4;
use rand::Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn params(net: &Network, id: NodeId) -> Option<Vec<f64>> {
    match &net.nodes()[id].layer {
        Layer::Conv(c) => {
            let mut v = c.filters.weights().to_vec();
            v.extend(c.filters.bias().unwrap_or(&[]));
            Some(v)
        }
        Layer::BatchNorm(p) => Some([p.scale.as_slice(), &p.shift].concat()),
        Layer::Dense(p) => Some([p.weights.as_slice(), &p.bias].concat()),
        _ => None,
    }
}

fn set_params(net: &mut Network, id: NodeId, values: &[f64]) {
    if let Some(c) = net.conv_mut(id) {
        let (w, b) = c.filters.weights_and_bias_mut();
        let n = w.len();
        w.copy_from_slice(&values[..n]);
        if let Some(b) = b {
            b.copy_from_slice(&values[n..]);
        }
    } else if let Some(p) = net.batchnorm_mut(id) {
        let n = p.scale.len();
        p.scale.copy_from_slice(&values[..n]);
        p.shift.copy_from_slice(&values[n..]);
    } else if let Some(p) = net.dense_mut(id) {
        let n = p.weights.len();
        p.weights.copy_from_slice(&values[..n]);
        p.bias.copy_from_slice(&values[n..]);
    }
}

fn flatten(g: &ParamGrad) -> Vec<f64> {
    match g {
        ParamGrad::Conv { weights, bias } => [weights.as_slice(), bias.as_deref().unwrap_or(&[])].concat(),
        ParamGrad::BatchNorm { scale, shift } => [scale.as_slice(), shift].concat(),
        ParamGrad::Dense { weights, bias } => [weights.as_slice(), bias].concat(),
    }
}

/// Checks every parameter gradient and the input gradient of the scalar
/// `<logits, probe>` against central differences.
fn check(mut net: Network, seed: u64) {
    let mut r = rng(seed);
    randomize_batchnorms(&mut net, &mut r);
    let [c, h, w] = net.input_dims();
    let batch = random_tensor(&mut r, [2, c, h, w]);
    let logits_dims = net.forward(&batch, &[]).unwrap().logits.dims();
    let probe = random_tensor(&mut r, logits_dims);
    let objective = |n: &Network, x: &Tensor4| dot(n.forward(x, &[]).unwrap().logits.data(), probe.data());

    let trace = net.forward_traced(&batch, true).unwrap();
    let grads = net.backward(&trace, &probe).unwrap();

    let input_fd = numeric_gradient(batch.data(), STEP, |x| {
        objective(&net, &Tensor4::from_vec(batch.dims(), x.to_vec()).unwrap())
    });
    let err = relative_error(grads.input.data(), &input_fd);
    assert!(err < TOL, "input gradient relative error {err}");

    let mut checked = 0;
    for id in 0..net.nodes().len() {
        let Some(p) = params(&net, id) else {
            assert!(grads.params[id].is_none());
            continue;
        };
        let analytic = flatten(grads.params[id].as_ref().expect("parameter gradient"));
        let mut scratch = net.clone();
        let fd = numeric_gradient(&p, STEP, |v| {
            set_params(&mut scratch, id, v);
            objective(&scratch, &batch)
        });
        let err = relative_error(&analytic, &fd);
        assert!(err < TOL, "node {id} ({}) relative error {err}", net.nodes()[id].name);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn plain_stack_with_pools() {
    let mut b = NetworkBuilder::new(2, 6, 6, 1);
    let x = b.conv(0, 3, 3, 1, 1, true).unwrap();
    let x = b.batch_norm(x).unwrap();
    let x = b.relu(x).unwrap();
    let x = b.max_pool(x, 2, 2, 0).unwrap();
    let x = b.conv(x, 4, 3, 1, 1, false).unwrap();
    let x = b.avg_pool(x, 3, 3).unwrap();
    let d = b.dense(x, 3).unwrap();
    check(b.finish(d).unwrap(), 11);
}

#[test]
fn strided_conv_and_global_pool() {
    let mut b = NetworkBuilder::new(3, 7, 7, 2);
    let x = b.conv_bn_relu(0, 4, 3, 2, 1, false).unwrap();
    let x = b.max_pool(x, 3, 2, 1).unwrap();
    let x = b.global_avg_pool(x).unwrap();
    let d = b.dense(x, 4).unwrap();
    check(b.finish(d).unwrap(), 12);
}

#[test]
fn residual_add_and_channel_pad() {
    let mut b = NetworkBuilder::new(2, 8, 8, 3);
    let x = b.conv_bn_relu(0, 2, 3, 1, 1, false).unwrap();
    let y = b.conv(x, 4, 3, 2, 1, false).unwrap();
    let y = b.batch_norm(y).unwrap();
    let s = b.channel_pad(x, 2, 1, 1).unwrap();
    let z = b.add(y, s).unwrap();
    let z = b.relu(z).unwrap();
    let z = b.global_avg_pool(z).unwrap();
    let d = b.dense(z, 3).unwrap();
    check(b.finish(d).unwrap(), 13);
}

#[test]
fn concatenated_branches() {
    let mut b = NetworkBuilder::new(2, 5, 5, 4);
    let a = b.conv_bn_relu(0, 2, 1, 1, 0, true).unwrap();
    let c = b.conv_bn_relu(0, 3, 3, 1, 1, false).unwrap();
    let m = b.max_pool(0, 3, 1, 1).unwrap();
    let x = b.concat(&[a, c, m]).unwrap();
    let x = b.conv(x, 2, 3, 1, 1, true).unwrap();
    let d = b.dense(x, 2).unwrap();
    check(b.finish(d).unwrap(), 14);
}

#[test]
fn several_random_seeds() {
    let mut r = rng(0);
    for _ in 0..3 {
        let seed = r.random();
        let mut b = NetworkBuilder::new(1, 6, 6, seed);
        let x = b.conv_bn_relu(0, 3, 3, 1, 1, true).unwrap();
        let x = b.avg_pool(x, 2, 2).unwrap();
        let d = b.dense(x, 2).unwrap();
        check(b.finish(d).unwrap(), seed);
    }
}
