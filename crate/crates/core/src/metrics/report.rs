//! Corpus and per-question-type metric reports.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bleu::{bleu4, BleuSmoothing};
use super::cider::{cider, SIGMA};
use super::geometric::{accuracy_metrics, geometric_errors, GeometricEntry, GeometricKind, Thresholds, TurnErrors};
use super::text::TOKENIZATION;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "trajectory")]
    Trajectory,
    #[serde(rename = "relation")]
    Relation,
    #[serde(rename = "motion trend")]
    MotionTrend,
    #[serde(rename = "scene-level")]
    SceneLevel,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Identity,
        QuestionType::Trajectory,
        QuestionType::Relation,
        QuestionType::MotionTrend,
        QuestionType::SceneLevel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            QuestionType::Identity => "identity",
            QuestionType::Trajectory => "trajectory",
            QuestionType::Relation => "relation",
            QuestionType::MotionTrend => "motion trend",
            QuestionType::SceneLevel => "scene-level",
        }
    }

    /// How geometric targets of this type are scored; `None` when the type
    /// reports language metrics only.
    pub fn geometric_kind(self) -> Option<GeometricKind> {
        match self {
            QuestionType::Identity | QuestionType::Relation => Some(GeometricKind::Point),
            QuestionType::Trajectory | QuestionType::MotionTrend => Some(GeometricKind::Trajectory),
            QuestionType::SceneLevel => None,
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuestionType::ALL
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::Data(alloc::format!("unknown question type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguagePair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Everything needed to score one dialogue turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult {
    pub question_type: QuestionType,
    /// Ground-truth targets paired positionally with predictions.
    pub geometric: Vec<GeometricEntry>,
    /// Present for turns scored on their text answer.
    pub language: Option<LanguagePair>,
    /// No prediction record was supplied for this turn.
    pub missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TurnCounts {
    pub point_turns: usize,
    pub trajectory_turns: usize,
    pub pooled_valid_steps: usize,
    pub language_turns: usize,
    pub missing_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "SAcc@0.5")]
    pub sacc: Option<f64>,
    #[serde(rename = "Traj-Acc@1.0")]
    pub traj_acc: Option<f64>,
    #[serde(rename = "TAcc@0.5")]
    pub tacc: Option<f64>,
    #[serde(rename = "CIDEr")]
    pub cider: Option<f64>,
    #[serde(rename = "BLEU-4")]
    pub bleu4: Option<f64>,
    /// Reserved; never computed.
    #[serde(rename = "METEOR")]
    pub meteor: Option<f64>,
    pub counts: TurnCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub thresholds: Thresholds,
    pub comparison: String,
    pub tokenization: String,
    pub cider_variant: String,
    pub bleu_smoothing: BleuSmoothing,
    pub missing_prediction: String,
    pub target_alignment: String,
}

impl ReportConfig {
    pub fn new(thresholds: Thresholds, bleu_smoothing: BleuSmoothing) -> Self {
        Self {
            thresholds,
            comparison: "error < threshold".into(),
            tokenization: TOKENIZATION.into(),
            cider_variant: alloc::format!("CIDEr-D, n=1..4, sigma={SIGMA}, x10"),
            bleu_smoothing,
            missing_prediction: "every valid step of a missing turn counts as a miss".into(),
            target_alignment: "positional (query order)".into(),
        }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self::new(Thresholds::default(), BleuSmoothing::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ReportConfig,
    pub overall: MetricsRow,
    /// Only types with at least one turn appear.
    pub by_type: BTreeMap<String, MetricsRow>,
}

fn score_rows(turns: &[&TurnResult], cfg: &ReportConfig) -> Result<MetricsRow> {
    let mut errors = TurnErrors::default();
    let mut counts = TurnCounts::default();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for t in turns {
        counts.missing_turns += usize::from(t.missing);
        if let Some(kind) = t.question_type.geometric_kind() {
            if !t.geometric.is_empty() {
                let entries: Vec<GeometricEntry> = t
                    .geometric
                    .iter()
                    .map(|e| GeometricEntry { kind, ..e.clone() })
                    .collect();
                errors.extend(geometric_errors(&entries)?);
            }
        }
        if let Some(lang) = &t.language {
            hyps.push(lang.hypothesis.clone());
            refs.push(lang.references.clone());
        }
    }
    counts.point_turns = errors.point_errors.len();
    counts.trajectory_turns = errors.trajectory_means.len();
    counts.pooled_valid_steps = errors.pooled_steps();
    counts.language_turns = hyps.len();
    let acc = accuracy_metrics(&errors, cfg.thresholds);
    let (cider_score, bleu) = if hyps.is_empty() {
        (None, None)
    } else {
        (Some(cider(&hyps, &refs)?), Some(bleu4(&hyps, &refs, cfg.bleu_smoothing)?))
    };
    Ok(MetricsRow {
        sacc: acc.sacc,
        traj_acc: acc.traj_acc,
        tacc: acc.tacc,
        cider: cider_score,
        bleu4: bleu,
        meteor: None,
        counts,
    })
}

/// Corpus row plus one row per question type present. Scene-level turns
/// contribute language metrics only.
pub fn aggregate_report(turns: &[TurnResult], cfg: &ReportConfig) -> Result<MetricsReport> {
    let all: Vec<&TurnResult> = turns.iter().collect();
    let overall = score_rows(&all, cfg)?;
    let mut by_type = BTreeMap::new();
    for ty in QuestionType::ALL {
        let subset: Vec<&TurnResult> = turns.iter().filter(|t| t.question_type == ty).collect();
        if !subset.is_empty() {
            by_type.insert(ty.label().to_string(), score_rows(&subset, cfg)?);
        }
    }
    Ok(MetricsReport {
        config: cfg.clone(),
        overall,
        by_type,
    })
}
