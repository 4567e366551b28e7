//! Small-scale fine-tuning.
//!
//! Batchnorm layers keep using their stored statistics while training; only
//! their affine parameters learn. That keeps the forward pass identical
//! between training and evaluation, which the freeze guarantees rely on.

mod schedule;
mod sgd;

pub use schedule::{prune_finetune_schedule, run_schedule, ScheduleMode, ScheduleOutcome, StageReport};
pub use sgd::OptimizerState;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gather, DatasetSource};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::planner::FreezeMask;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Zero-based epochs at whose start the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 30,
            lr_drop_epochs: vec![5, 10],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0 && self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return Err(Error::Config("momentum and weight decay must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count() as i32;
        self.learning_rate / 10f64.powi(drops)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Training accuracy over the epoch, measured on the forward passes used for the updates.
    pub top1: f64,
}

pub struct TrainOutcome {
    pub net: Network,
    pub trajectory: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> (f64, Tensor4) {
    let [g, k, _, _] = logits.dims();
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0;
    for n in 0..g {
        let z = logits.image(n);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - z[labels[n]];
        let row = &mut grad.data_mut()[n * k..(n + 1) * k];
        for c in 0..k {
            row[c] = (exps[c] / sum - (c == labels[n]) as usize as f64) / g as f64;
        }
    }
    (loss / g as f64, grad)
}

/// Index of the largest logit per image; ties go to the lowest class.
pub fn argmax_classes(logits: &Tensor4) -> Vec<usize> {
    (0..logits.images())
        .map(|n| {
            let z = logits.image(n);
            (1..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best })
        })
        .collect()
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(net: &Network, data: &dyn DatasetSource) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(256) {
        let batch = gather(data, chunk);
        let logits = net.forward(&batch.images, &[])?.logits;
        correct += argmax_classes(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn train(net: &Network, mask: &FreezeMask, data: &dyn DatasetSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(net, mask, data, cfg, OptimizerState::default())
}

/// Like [`train`], continuing from existing momentum buffers.
pub fn train_from(
    net: &Network,
    mask: &FreezeMask,
    data: &dyn DatasetSource,
    cfg: &TrainConfig,
    optimizer: OptimizerState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.image_dims() != net.input_dims() {
        return Err(Error::Shape(format!(
            "training images {:?} do not match network input {:?}",
            data.image_dims(),
            net.input_dims()
        )));
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network predicts {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let frozen = sgd::frozen_entries(net, mask)?;
    let mut net = net.clone();
    let mut state = optimizer;
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather(data, chunk);
            let trace = net.forward_traced(&batch.images, true)?;
            let (loss, grad) = softmax_cross_entropy(&trace.logits, &batch.labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_classes(&trace.logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            let grads = net.backward(&trace, &grad)?;
            let hp = sgd::StepParams {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            sgd::sgd_step(&mut net, &mut state, &grads.params, &frozen, &hp);
        }
        trajectory.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            top1: correct as f64 / data.len() as f64,
        });
    }
    Ok(TrainOutcome {
        net,
        trajectory,
        optimizer: state,
    })
}
