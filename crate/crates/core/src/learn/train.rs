//! Plain minibatch SGD.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{backward, forward_batch};
use super::LossOptions;
use crate::model::{DialogueSample, Model};
use crate::{Error, Result};

/// Share of each batch trained with gold evidence by default. Pure self
/// rollouts leave the model unused to cleaner evidence, pure gold rollouts
/// leave it unused to its own mistakes.
pub const DEFAULT_GOLD_FRACTION: f64 = 0.5;

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossOptions,
    /// Zero the residual head and keep it fixed, so predictions are the
    /// anchors alone.
    pub anchor_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            loss: LossOptions {
                gold_fraction: DEFAULT_GOLD_FRACTION,
                ..LossOptions::default()
            },
            anchor_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::input("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.loss.gold_fraction) {
            return Err(Error::input("gold fraction must lie in [0, 1]"));
        }
        self.loss.weights.validate()
    }
}

/// Batch loss terms before the update of `iteration` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCurveRow {
    pub iteration: usize,
    pub total: f64,
    pub trajectory: f64,
    pub smoothness: f64,
    pub identity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossCurveRow>,
}

/// Runs `config.iterations` SGD steps on batches drawn uniformly (with
/// replacement) from `dataset`.
pub fn train_toy(config: &TrainConfig, dataset: &[DialogueSample], init: Model) -> Result<TrainOutcome> {
    config.validate()?;
    init.validate()?;
    let mut model = init;
    if config.anchor_only {
        zero_residual(&mut model);
    }
    if config.iterations > 0 && dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.iterations);
    let mut batch = Vec::with_capacity(config.batch_size);
    for iteration in 0..config.iterations {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(dataset[rng.random_range(0..dataset.len())].clone());
        }
        let fwd = forward_batch(&model, &batch, &config.loss, None)?;
        let b = fwd.breakdown;
        if !(b.total.is_finite() && b.total <= DIVERGENCE_LIMIT) {
            return Err(Error::Diverged {
                iteration,
                loss: b.total,
            });
        }
        curve.push(LossCurveRow {
            iteration,
            total: b.total,
            trajectory: b.trajectory,
            smoothness: b.smoothness,
            identity: b.identity,
        });
        let grads = backward(&model, &batch, &config.loss, &fwd);
        for ((name, p), (_, g)) in model.blocks_mut().into_iter().zip(grads.blocks()) {
            if config.anchor_only && name.starts_with("residual.") {
                continue;
            }
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= config.learning_rate * gi;
            }
        }
    }
    Ok(TrainOutcome { model, curve })
}

fn zero_residual(model: &mut Model) {
    for (name, p) in model.blocks_mut() {
        if name.starts_with("residual.") {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
