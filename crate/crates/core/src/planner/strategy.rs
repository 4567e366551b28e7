//! Filter selection rules. Each returns the prune set for one layer given its
//! rank sums; all orderings are total, so results never depend on sort stability.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::NodeId;

#[derive(Clone, Copy, Debug)]
pub struct SelectionContext {
    pub layer_id: NodeId,
    pub seed: u64,
}

pub trait SelectionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn uses_seed(&self) -> bool {
        false
    }
    /// Indices of the `n_prune` filters to remove, in any order. Callers
    /// guarantee `n_prune < rank_sums.len()`.
    fn select(&self, rank_sums: &[u64], n_prune: usize, ctx: SelectionContext) -> Vec<usize>;
}

/// Smallest sums first; among equal sums the larger index goes first.
pub fn ascending_order(rank_sums: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rank_sums.len()).collect();
    idx.sort_by_key(|&j| (rank_sums[j], Reverse(j)));
    idx
}

/// Largest sums first; among equal sums the larger index goes first.
pub fn descending_order(rank_sums: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rank_sums.len()).collect();
    idx.sort_by_key(|&j| (Reverse(rank_sums[j]), Reverse(j)));
    idx
}

pub struct HRank;

impl SelectionStrategy for HRank {
    fn name(&self) -> &'static str {
        "hrank"
    }

    fn select(&self, rank_sums: &[u64], n_prune: usize, _: SelectionContext) -> Vec<usize> {
        ascending_order(rank_sums).into_iter().take(n_prune).collect()
    }
}

pub struct ReverseRank;

impl SelectionStrategy for ReverseRank {
    fn name(&self) -> &'static str {
        "reverse"
    }

    fn select(&self, rank_sums: &[u64], n_prune: usize, _: SelectionContext) -> Vec<usize> {
        descending_order(rank_sums).into_iter().take(n_prune).collect()
    }
}

/// `⌈n/2⌉` lowest plus `⌊n/2⌋` highest.
pub struct Edge;

impl SelectionStrategy for Edge {
    fn name(&self) -> &'static str {
        "edge"
    }

    fn select(&self, rank_sums: &[u64], n_prune: usize, _: SelectionContext) -> Vec<usize> {
        let mut chosen: Vec<usize> = ascending_order(rank_sums).into_iter().take(n_prune.div_ceil(2)).collect();
        let high: Vec<usize> = descending_order(rank_sums)
            .into_iter()
            .filter(|j| !chosen.contains(j))
            .take(n_prune / 2)
            .collect();
        chosen.extend(high);
        chosen
    }
}

/// Uniform subset; the stream is derived from `(seed, layer_id)` so layers draw independently.
pub struct Random;

impl SelectionStrategy for Random {
    fn name(&self) -> &'static str {
        "random"
    }

    fn uses_seed(&self) -> bool {
        true
    }

    fn select(&self, rank_sums: &[u64], n_prune: usize, ctx: SelectionContext) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        rng.set_stream(ctx.layer_id as u64);
        rand::seq::index::sample(&mut rng, rank_sums.len(), n_prune).into_vec()
    }
}

pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Box<dyn SelectionStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(HRank));
        r.register(Box::new(Edge));
        r.register(Box::new(Random));
        r.register(Box::new(ReverseRank));
        r
    }

    pub fn register(&mut self, strategy: Box<dyn SelectionStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SelectionStrategy> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {name:?}; available: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CTX: SelectionContext = SelectionContext { layer_id: 1, seed: 7 };

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn hrank_examples() {
        assert_eq!(sorted(HRank.select(&[5, 1, 3], 1, CTX)), vec![1]);
        assert_eq!(sorted(HRank.select(&[4, 4, 2, 2], 2, CTX)), vec![2, 3]);
        assert_eq!(sorted(HRank.select(&[3, 3, 3], 1, CTX)), vec![2]);
    }

    #[test]
    fn reverse_and_edge_examples() {
        assert_eq!(ReverseRank.select(&[5, 1, 3], 1, CTX), vec![0]);
        assert_eq!(sorted(Edge.select(&[1, 5, 9, 13], 2, CTX)), vec![0, 3]);
        assert_eq!(sorted(Edge.select(&[1, 5, 9, 13], 3, CTX)), vec![0, 1, 3]);
    }

    #[test]
    fn edge_never_picks_twice_on_ties() {
        let p = sorted(Edge.select(&[3, 3, 3, 3], 3, CTX));
        assert_eq!(p, vec![1, 2, 3]);
    }

    #[test]
    fn random_is_seeded_per_layer() {
        let sums = [0u64; 32];
        assert_eq!(Random.select(&sums, 10, CTX), Random.select(&sums, 10, CTX));
        let other = SelectionContext { layer_id: 2, ..CTX };
        assert_ne!(Random.select(&sums, 10, CTX), Random.select(&sums, 10, other));
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        assert!(matches!(StrategyRegistry::with_defaults().get("l1"), Err(Error::Config(_))));
    }
}
