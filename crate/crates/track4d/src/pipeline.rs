//! Glue between on-disk corpora and the numerical core: building dialogue
//! samples, training, prediction and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use track4d_core::decoder::DecoderConfig;
use track4d_core::encoding::{lift_observations, FourierTimeConfig, DEFAULT_NUM_FREQUENCIES};
use track4d_core::geometry::WorldPoint;
use track4d_core::metrics::{aggregate_report, BleuSmoothing, MetricsReport, QuestionType, ReportConfig, Thresholds};
use track4d_core::model::{run_dialogue, DialogueSample, DialogueTurnSpec, HistoryMode, Model, TurnTarget};
use track4d_core::state::QueryEmbedding;
use track4d_core::HORIZON;

use crate::bench::{
    align_predictions, load_corpus, AuditBlock, ClipSample, DialogueTurn, PredictedTrajectory, PredictionRecord, StepAudit,
};
use crate::synth::TokenFile;
use crate::{Error, Result};

pub fn tokens_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.tokens.json"))
}

pub fn load_tokens(dir: &Path, clip: &ClipSample) -> Result<TokenFile> {
    let path = tokens_path(dir, &clip.clip_id);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let tokens: TokenFile = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&path))?;
    if tokens.clip_id != clip.clip_id {
        return Err(Error::Data(format!(
            "{}: tokens belong to clip {:?}, expected {:?}",
            path.display(),
            tokens.clip_id,
            clip.clip_id
        )));
    }
    if let Some(o) = tokens.observations.iter().find(|o| o.feature.len() != tokens.feature_dim) {
        return Err(Error::Data(format!(
            "{}: patch {} has {} feature channels, header says {}",
            path.display(),
            o.patch_id,
            o.feature.len(),
            tokens.feature_dim
        )));
    }
    Ok(tokens)
}

/// A clip together with its evidence tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusClip {
    pub clip: ClipSample,
    pub tokens: TokenFile,
}

pub fn load_corpus_with_tokens(dir: &Path) -> Result<Vec<CorpusClip>> {
    load_corpus(dir)?
        .into_iter()
        .map(|clip| {
            let tokens = load_tokens(dir, &clip)?;
            Ok(CorpusClip { clip, tokens })
        })
        .collect()
}

/// Token feature width shared by every clip of a corpus.
pub fn corpus_feature_dim(corpus: &[CorpusClip]) -> Result<usize> {
    let Some(first) = corpus.first() else {
        return Err(Error::Data("corpus contains no clips".into()));
    };
    let d = first.tokens.feature_dim;
    if let Some(c) = corpus.iter().find(|c| c.tokens.feature_dim != d) {
        return Err(Error::Data(format!(
            "clip {:?} has feature dimension {} but {:?} has {d}",
            c.clip.clip_id, c.tokens.feature_dim, first.clip.clip_id
        )));
    }
    Ok(d)
}

/// Fourier frequencies whose slowest period spans the longest clip.
pub fn corpus_frequencies(corpus: &[CorpusClip]) -> Result<FourierTimeConfig> {
    let duration = corpus
        .iter()
        .map(|c| c.clip.timestamps.last().copied().unwrap_or(0.0) - c.clip.timestamps[0])
        .fold(0.0, f64::max);
    let duration = if duration > 0.0 { 2.0 * duration } else { 1.0 };
    Ok(FourierTimeConfig::geometric(DEFAULT_NUM_FREQUENCIES, duration)?)
}

fn turn_target(turn: &DialogueTurn) -> Option<TurnTarget> {
    // The model answers one target per turn: the first requested one.
    turn.targets.as_ref().and_then(|t| t.first()).map(|gt| TurnTarget {
        target_id: gt.target_id.clone(),
        points: gt.points.clone(),
        valid: gt.valid.clone(),
        times: gt.times.clone(),
    })
}

/// Lifts the clip's tokens through its calibration and embeds each question.
pub fn dialogue_sample(c: &CorpusClip, token_dim: usize) -> Result<DialogueSample> {
    if c.tokens.feature_dim != token_dim {
        return Err(Error::Config(format!(
            "clip {:?} has {}-dimensional tokens but the model expects {token_dim}",
            c.clip.clip_id, c.tokens.feature_dim
        )));
    }
    let views = c.clip.camera_views()?;
    let tokens = lift_observations(&views, &c.tokens.observations)?;
    let turns = c
        .clip
        .turns
        .iter()
        .map(|t| DialogueTurnSpec {
            query: QueryEmbedding::from_text(&t.question, token_dim),
            target: turn_target(t),
        })
        .collect();
    Ok(DialogueSample { tokens, turns })
}

pub fn history_label(mode: HistoryMode) -> &'static str {
    match mode {
        HistoryMode::None => "none",
        HistoryMode::SelfHistory => "self",
        HistoryMode::Gold => "gold",
    }
}

fn fmt_point(p: WorldPoint) -> String {
    format!("({:.2}, {:.2}, {:.2})", p.x, p.y, p.z)
}

/// Text answer for a turn, echoing the predicted geometry when there is one.
fn templated_answer(turn: &DialogueTurn, points: Option<&[WorldPoint]>) -> String {
    let name = turn
        .targets
        .as_ref()
        .and_then(|t| t.first())
        .map_or("queried", |t| t.target_id.as_str());
    match (turn.question_type, points) {
        (QuestionType::Identity, Some(p)) => {
            let h = turn.targets.as_ref().and_then(|t| t[0].valid.iter().position(|v| *v)).unwrap_or(0);
            format!("The {name} target is at {}.", fmt_point(p[h]))
        }
        (QuestionType::MotionTrend, Some(p)) => {
            let d = p[HORIZON - 1] - p[0];
            let dir = if d.x.abs() >= d.y.abs() {
                if d.x >= 0.0 { "east" } else { "west" }
            } else if d.y >= 0.0 {
                "north"
            } else {
                "south"
            };
            format!("It heads {dir}.")
        }
        (_, Some(p)) => format!("The {name} target moves from {} to {}.", fmt_point(p[0]), fmt_point(p[HORIZON - 1])),
        (QuestionType::Relation, None) => "The first target is closer.".into(),
        (_, None) => "Several targets move through the scene.".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub history: HistoryMode,
    pub audit: bool,
    pub decoder: DecoderConfig,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            history: HistoryMode::SelfHistory,
            audit: false,
            decoder: DecoderConfig::default(),
        }
    }
}

/// One record per turn, in clip order then turn order.
pub fn predict_corpus(model: &Model, corpus: &[CorpusClip], opts: &PredictOptions) -> Result<Vec<PredictionRecord>> {
    let d = model.token_dim();
    let mut records = Vec::new();
    for c in corpus {
        let sample = dialogue_sample(c, d)?;
        let outcomes = run_dialogue(model, &sample, opts.history, &opts.decoder)?;
        for (turn, out) in c.clip.turns.iter().zip(outcomes) {
            let points = out.prediction.as_ref().map(|p| p.points.as_slice());
            let trajectories = match (&out.prediction, &turn.targets) {
                (Some(p), Some(targets)) => vec![PredictedTrajectory {
                    target_id: Some(targets[0].target_id.clone()),
                    points: p.points.clone(),
                    valid: vec![true; p.points.len()],
                }],
                _ => Vec::new(),
            };
            let audit = opts.audit.then(|| AuditBlock {
                history: history_label(opts.history).into(),
                slot: out.slot.vector.clone(),
                steps: out
                    .prediction
                    .as_ref()
                    .map(|p| {
                        (0..p.points.len())
                            .map(|h| StepAudit {
                                anchor: p.anchors[h],
                                attention_entropy: p.attention[h].entropy(),
                                fallback: p.degenerate_fallback_used[h],
                            })
                            .collect()
                    })
                    .unwrap_or_default(),
            });
            records.push(PredictionRecord {
                clip_id: c.clip.clip_id.clone(),
                turn_index: turn.turn_index,
                answer: templated_answer(turn, points),
                trajectories,
                audit,
            });
        }
    }
    Ok(records)
}

/// Ground truth written out as predictions.
pub fn oracle_predictions(corpus: &[ClipSample]) -> Vec<PredictionRecord> {
    corpus
        .iter()
        .flat_map(|clip| {
            clip.turns.iter().map(|turn| PredictionRecord {
                clip_id: clip.clip_id.clone(),
                turn_index: turn.turn_index,
                answer: turn.answer.clone(),
                trajectories: turn
                    .targets
                    .iter()
                    .flatten()
                    .map(|t| PredictedTrajectory {
                        target_id: Some(t.target_id.clone()),
                        points: t.points.clone(),
                        valid: t.valid.clone(),
                    })
                    .collect(),
                audit: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Thresholds,
    pub bleu_smoothing: BleuSmoothing,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            bleu_smoothing: BleuSmoothing::None,
        }
    }
}

pub fn evaluate(corpus: &[ClipSample], predictions: &[PredictionRecord], cfg: &EvalConfig) -> Result<MetricsReport> {
    let aligned = align_predictions(corpus, predictions)?;
    Ok(aggregate_report(&aligned.turns, &ReportConfig::new(cfg.thresholds, cfg.bleu_smoothing))?)
}
