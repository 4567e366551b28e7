//! Rank-guided structured filter pruning.
//!
//! The pipeline is: estimate the rank of every prunable convolution's feature
//! maps over an image sample ([`rank`]), turn those statistics and per-layer
//! rates into a keep/prune partition ([`planner`]), cut the network down
//! ([`surgeon`]) and fine-tune the result ([`trainer`]).

pub mod data;
pub mod error;
pub mod fingerprint;
pub mod graph;
pub mod planner;
pub mod rank;
pub mod surgeon;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
