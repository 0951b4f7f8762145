//! Geometric training objectives, their reverse-mode gradients, a
//! finite-difference checker and a plain SGD loop.
//!
//! Slots are carried from turn to turn under a stop-gradient: the previous
//! slot and the evidence pool entering each update are constants.

mod backward;
pub mod gradcheck;
pub mod train;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::geometry::WorldPoint;
use crate::model::HistoryMode;
use crate::state::DEFAULT_IDENTITY_MARGIN;
use crate::{Error, Result};

pub use backward::{loss_and_gradients, total_loss};
pub use gradcheck::{grad_check, BlockCheck, GradCheckConfig, GradCheckReport};
pub use train::{train_toy, LossCurveRow, TrainConfig, TrainOutcome, DEFAULT_GOLD_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub trajectory: f64,
    pub smoothness: f64,
    pub identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            trajectory: 1.0,
            smoothness: 0.1,
            identity: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(trajectory: f64, smoothness: f64, identity: f64) -> Result<Self> {
        let w = Self {
            trajectory,
            smoothness,
            identity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.trajectory, self.smoothness, self.identity] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input("loss weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Everything besides parameters that the objective depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub identity_margin: f64,
    pub decoder: DecoderConfig,
    /// How slot contexts are carried between turns during training.
    pub history: HistoryMode,
    /// Share of each batch rolled out with gold evidence instead of
    /// `history`. Spread evenly over batch positions.
    pub gold_fraction: f64,
}

impl LossOptions {
    /// History mode for position `i` of a batch.
    pub fn history_for(&self, i: usize) -> HistoryMode {
        let f = self.gold_fraction.clamp(0.0, 1.0);
        if ((i + 1) as f64 * f).floor() > (i as f64 * f).floor() {
            HistoryMode::Gold
        } else {
            self.history
        }
    }
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            identity_margin: DEFAULT_IDENTITY_MARGIN,
            decoder: DecoderConfig::default(),
            history: HistoryMode::default(),
            gold_fraction: 0.0,
        }
    }
}

/// Weighted total and its unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub trajectory: f64,
    pub smoothness: f64,
    pub identity: f64,
    pub geometric_turns: usize,
    /// Geometric turns whose target had no valid step.
    pub empty_targets: usize,
}

/// Mean over valid steps of the squared error; zero without valid steps.
pub fn trajectory_loss(pred: &[WorldPoint], target: &[WorldPoint], valid: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), v) in pred.iter().zip(target).zip(valid) {
        if *v {
            let e = *p - *t;
            sum += e.dot(e);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean squared second difference; zero for fewer than three points.
pub fn smoothness_loss(pred: &[WorldPoint]) -> f64 {
    if pred.len() < 3 {
        return 0.0;
    }
    let sum: f64 = pred
        .windows(3)
        .map(|w| {
            let d = w[2] - w[1] * 2.0 + w[0];
            d.dot(d)
        })
        .sum();
    sum / (pred.len() - 2) as f64
}

/// `∂ trajectory_loss / ∂ pred`
pub(crate) fn trajectory_loss_grad(pred: &[WorldPoint], target: &[WorldPoint], valid: &[bool]) -> Vec<WorldPoint> {
    let count = valid.iter().filter(|v| **v).count();
    pred.iter()
        .zip(target)
        .zip(valid)
        .map(|((p, t), v)| {
            if *v {
                (*p - *t) * (2.0 / count as f64)
            } else {
                WorldPoint::ZERO
            }
        })
        .collect()
}

/// `∂ smoothness_loss / ∂ pred`
pub(crate) fn smoothness_loss_grad(pred: &[WorldPoint]) -> Vec<WorldPoint> {
    let mut g = alloc::vec![WorldPoint::ZERO; pred.len()];
    if pred.len() < 3 {
        return g;
    }
    let scale = 2.0 / (pred.len() - 2) as f64;
    for i in 1..pred.len() - 1 {
        let d = (pred[i + 1] - pred[i] * 2.0 + pred[i - 1]) * scale;
        g[i - 1] = g[i - 1] + d;
        g[i] = g[i] - d * 2.0;
        g[i + 1] = g[i + 1] + d;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn p(x: f64) -> WorldPoint {
        WorldPoint::new(x, 0.0, 0.0)
    }

    #[test]
    fn gold_fraction_spreads_over_batch_positions() {
        let modes = |f: f64| {
            let o = LossOptions {
                gold_fraction: f,
                ..LossOptions::default()
            };
            (0..8).map(|i| o.history_for(i) == HistoryMode::Gold).collect::<alloc::vec::Vec<_>>()
        };
        assert_eq!(modes(0.0), vec![false; 8]);
        assert_eq!(modes(1.0), vec![true; 8]);
        assert_eq!(modes(0.5), vec![false, true, false, true, false, true, false, true]);
        assert_eq!(modes(0.25).iter().filter(|g| **g).count(), 2);
    }

    #[test]
    fn trajectory_loss_examples() {
        let t = vec![p(0.0), p(1.0), p(2.0), p(3.0)];
        assert_eq!(trajectory_loss(&t, &t, &[true; 4]), 0.0);
        let pred = vec![p(1.0), p(1.0), p(2.0), p(3.0)];
        assert_eq!(trajectory_loss(&pred, &t, &[true, false, false, false]), 1.0);
        assert_eq!(trajectory_loss(&pred, &t, &[false; 4]), 0.0);
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_loss(&[p(0.0), p(0.0), p(1.0), p(2.0)]), 0.5);
        assert_eq!(smoothness_loss(&[p(0.0), p(1.5), p(3.0), p(4.5)]), 0.0);
        assert_eq!(smoothness_loss(&[p(7.0); 4]), 0.0);
        assert_eq!(smoothness_loss(&[p(0.0), p(5.0)]), 0.0);
    }

    #[test]
    fn analytic_loss_gradients_match_differences() {
        let pred = vec![
            WorldPoint::new(0.3, -1.0, 2.0),
            WorldPoint::new(1.1, 0.2, 0.5),
            WorldPoint::new(-0.4, 0.9, 1.5),
            WorldPoint::new(2.0, 2.0, -1.0),
        ];
        let target = vec![WorldPoint::new(1.0, 1.0, 1.0); 4];
        let valid = [true, false, true, true];
        let f = |q: &[WorldPoint]| trajectory_loss(q, &target, &valid) + 0.7 * smoothness_loss(q);
        let mut g = trajectory_loss_grad(&pred, &target, &valid);
        for (gi, si) in g.iter_mut().zip(smoothness_loss_grad(&pred)) {
            *gi = *gi + si * 0.7;
        }
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let mut plus = pred.clone();
                let mut minus = pred.clone();
                let mut a = plus[i].to_array();
                a[k] += h;
                plus[i] = WorldPoint::new(a[0], a[1], a[2]);
                let mut b = minus[i].to_array();
                b[k] -= h;
                minus[i] = WorldPoint::new(b[0], b[1], b[2]);
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((fd - g[i][k]).abs() < 1e-7, "step {i} axis {k}");
            }
        }
    }
}
