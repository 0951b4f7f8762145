//! Point and trajectory errors and the three geometric accuracies.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::WorldPoint;
use crate::{Error, Result};

/// How a geometric target is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometricKind {
    /// One error per target: the mean over its valid steps (normally one).
    Point,
    /// Per-step errors pooled for TAcc, and their mean for Traj-Acc.
    Trajectory,
}

/// One ground-truth target paired with its (possibly missing) prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricEntry {
    pub kind: GeometricKind,
    /// `None` scores every valid step as a miss.
    pub prediction: Option<Vec<WorldPoint>>,
    pub target: Vec<WorldPoint>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnErrors {
    pub point_errors: Vec<f64>,
    /// Errors of the valid steps of each trajectory target.
    pub step_errors: Vec<Vec<f64>>,
    /// `ē_j`, aligned with `step_errors`.
    pub trajectory_means: Vec<f64>,
}

impl TurnErrors {
    pub fn pooled_steps(&self) -> usize {
        self.step_errors.iter().map(Vec::len).sum()
    }

    pub fn extend(&mut self, other: TurnErrors) {
        self.point_errors.extend(other.point_errors);
        self.step_errors.extend(other.step_errors);
        self.trajectory_means.extend(other.trajectory_means);
    }
}

/// Thresholds in meters; a step or turn is correct iff its error is
/// strictly below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub point: f64,
    pub trajectory: f64,
    pub step: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            point: 0.5,
            trajectory: 1.0,
            step: 0.5,
        }
    }
}

/// Accuracies; `None` when the relevant set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracies {
    pub sacc: Option<f64>,
    pub traj_acc: Option<f64>,
    pub tacc: Option<f64>,
}

/// Euclidean errors per entry. Entries without any valid step contribute
/// nothing.
pub fn geometric_errors(entries: &[GeometricEntry]) -> Result<TurnErrors> {
    let mut out = TurnErrors::default();
    for (i, e) in entries.iter().enumerate() {
        if e.valid.len() != e.target.len() {
            return Err(Error::Protocol(alloc::format!(
                "entry {i}: valid mask has {} steps, target has {}",
                e.valid.len(),
                e.target.len()
            )));
        }
        if let Some(p) = &e.prediction {
            if p.len() != e.target.len() {
                return Err(Error::Protocol(alloc::format!(
                    "entry {i}: prediction has {} steps, target has {}",
                    p.len(),
                    e.target.len()
                )));
            }
        }
        let steps: Vec<f64> = (0..e.target.len())
            .filter(|&h| e.valid[h])
            .map(|h| match &e.prediction {
                Some(p) => (p[h] - e.target[h]).norm(),
                None => f64::INFINITY,
            })
            .collect();
        if steps.is_empty() {
            continue;
        }
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        match e.kind {
            GeometricKind::Point => out.point_errors.push(mean),
            GeometricKind::Trajectory => {
                out.trajectory_means.push(mean);
                out.step_errors.push(steps);
            }
        }
    }
    Ok(out)
}

fn fraction_below<'a>(values: impl Iterator<Item = &'a f64>, threshold: f64) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for v in values {
        total += 1;
        if *v < threshold {
            hits += 1;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn accuracy_metrics(errs: &TurnErrors, thresholds: Thresholds) -> Accuracies {
    Accuracies {
        sacc: fraction_below(errs.point_errors.iter(), thresholds.point),
        traj_acc: fraction_below(errs.trajectory_means.iter(), thresholds.trajectory),
        tacc: fraction_below(errs.step_errors.iter().flatten(), thresholds.step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn p(x: f64, y: f64, z: f64) -> WorldPoint {
        WorldPoint::new(x, y, z)
    }

    #[test]
    fn exact_prediction_has_zero_error() {
        let t = vec![p(1.0, 2.0, 3.0); 4];
        let e = geometric_errors(&[GeometricEntry {
            kind: GeometricKind::Trajectory,
            prediction: Some(t.clone()),
            target: t,
            valid: vec![true; 4],
        }])
        .unwrap();
        assert_eq!(e.step_errors, vec![vec![0.0; 4]]);
    }

    #[test]
    fn length_mismatch_is_protocol_error() {
        let err = geometric_errors(&[GeometricEntry {
            kind: GeometricKind::Point,
            prediction: Some(vec![p(0.0, 0.0, 0.0); 3]),
            target: vec![p(0.0, 0.0, 0.0); 4],
            valid: vec![true; 4],
        }]);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn missing_prediction_misses_every_valid_step() {
        let e = geometric_errors(&[GeometricEntry {
            kind: GeometricKind::Trajectory,
            prediction: None,
            target: vec![p(0.0, 0.0, 0.0); 4],
            valid: vec![true, false, true, true],
        }])
        .unwrap();
        assert_eq!(e.pooled_steps(), 3);
        let acc = accuracy_metrics(&e, Thresholds::default());
        assert_eq!(acc.tacc, Some(0.0));
        assert_eq!(acc.traj_acc, Some(0.0));
    }

    #[test]
    fn empty_sets_are_absent() {
        let acc = accuracy_metrics(&TurnErrors::default(), Thresholds::default());
        assert_eq!(acc, Accuracies::default());
    }
}
