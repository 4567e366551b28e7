//! Momentum SGD with coupled weight decay, in the usual deep-learning form:
//! `d = g + λ·p`, `v ← μ·v + d`, `p ← p − η·v`. Frozen entries skip all three.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Layer, Network, NodeId, ParamGrad};
use crate::planner::FreezeMask;

const MAGIC: &[u8; 8] = b"HRNKOPTM";
const VERSION: u32 = 1;

/// Momentum buffers per parameterized node, one vector per tensor in the
/// order weights, bias (conv, dense) or scale, shift (batchnorm).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub velocity: BTreeMap<NodeId, Vec<Vec<f64>>>,
}

impl OptimizerState {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.velocity.len() as u64).to_le_bytes());
        for (&id, tensors) in &self.velocity {
            out.extend_from_slice(&(id as u64).to_le_bytes());
            out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
            for t in tensors {
                out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("optimizer", m);
        if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not an optimizer state file"));
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[body.len()..] {
            return Err(Error::format("checksum", "optimizer state checksum does not match"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported optimizer version {version}")));
        }
        let mut u64_at = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().expect("8"))) };
        let step = u64_at()?;
        let entries = u64_at()?;
        let mut velocity = BTreeMap::new();
        for _ in 0..entries {
            let id = u64_at()? as usize;
            let count = u64_at()?;
            let mut tensors = Vec::new();
            for _ in 0..count {
                let len = u64_at()? as usize;
                let mut t = Vec::with_capacity(len.min(1 << 24));
                for _ in 0..len {
                    t.push(f64::from_bits(u64_at()?));
                }
                tensors.push(t);
            }
            velocity.insert(id, tensors);
        }
        Ok(OptimizerState { step, velocity })
    }
}

pub(crate) fn params_mut(layer: &mut Layer) -> Vec<&mut [f64]> {
    match layer {
        Layer::Conv(c) => {
            let (w, b) = c.filters.weights_and_bias_mut();
            let mut v = vec![w];
            v.extend(b);
            v
        }
        Layer::BatchNorm(p) => vec![&mut p.scale[..], &mut p.shift[..]],
        Layer::Dense(p) => vec![&mut p.weights[..], &mut p.bias[..]],
        _ => vec![],
    }
}

fn grads(g: &ParamGrad) -> Vec<&[f64]> {
    match g {
        ParamGrad::Conv { weights, bias } => {
            let mut v = vec![&weights[..]];
            v.extend(bias.as_deref());
            v
        }
        ParamGrad::BatchNorm { scale, shift } => vec![scale, shift],
        ParamGrad::Dense { weights, bias } => vec![weights, bias],
    }
}

/// Per node, per tensor: which entries may not move.
pub(crate) type FrozenEntries = BTreeMap<NodeId, Vec<Vec<bool>>>;

/// Expands filter-level freezing to the conv weights and bias of each frozen
/// filter plus the matching channel of the conv's own batchnorm.
pub(crate) fn frozen_entries(net: &Network, mask: &FreezeMask) -> Result<FrozenEntries> {
    mask.check_against(net)?;
    let mut out = FrozenEntries::new();
    for (&id, filters) in &mask.layers {
        if filters.is_empty() {
            continue;
        }
        let f = &net.conv(id).expect("checked").filters;
        let len = f.filter_len();
        let mut w = vec![false; f.weights().len()];
        let mut b = f.bias().map(|b| vec![false; b.len()]);
        for &j in filters {
            w[j * len..(j + 1) * len].iter_mut().for_each(|x| *x = true);
            if let Some(b) = b.as_mut() {
                b[j] = true;
            }
        }
        out.insert(id, std::iter::once(w).chain(b).collect());
        if let Some(bn) = net.owned_batchnorm(id) {
            let mut ch = vec![false; f.n_out()];
            filters.iter().for_each(|&j| ch[j] = true);
            out.insert(bn, vec![ch.clone(), ch]);
        }
    }
    Ok(out)
}

pub(crate) struct StepParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

pub(crate) fn sgd_step(
    net: &mut Network,
    state: &mut OptimizerState,
    param_grads: &[Option<ParamGrad>],
    frozen: &FrozenEntries,
    hp: &StepParams,
) {
    for (id, g) in param_grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let gs = grads(g);
        let mask = frozen.get(&id);
        let mut params = params_mut(net.layer_mut(id));
        let vel = state
            .velocity
            .entry(id)
            .or_insert_with(|| params.iter().map(|p| vec![0.0; p.len()]).collect());
        for (t, (p, g)) in params.iter_mut().zip(gs).enumerate() {
            let v = &mut vel[t];
            let m = mask.map(|m| &m[t]);
            for i in 0..p.len() {
                if m.is_some_and(|m| m[i]) {
                    continue;
                }
                let d = g[i] + hp.weight_decay * p[i];
                v[i] = hp.momentum * v[i] + d;
                p[i] -= hp.lr * v[i];
            }
        }
    }
    state.step += 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_state_round_trips() {
        let mut s = OptimizerState {
            step: 7,
            ..Default::default()
        };
        s.velocity.insert(3, vec![vec![1.5, -0.0, f64::MIN_POSITIVE], vec![]]);
        s.velocity.insert(9, vec![vec![2.0]]);
        assert_eq!(OptimizerState::decode(&s.encode()).unwrap(), s);
    }

    #[test]
    fn corrupted_state_is_rejected() {
        let mut bytes = OptimizerState::default().encode();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(OptimizerState::decode(&bytes).is_err());
    }
}
