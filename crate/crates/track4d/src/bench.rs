//! Clip-dialogue files, prediction records and their alignment.
//!
//! One clip per JSON file. Calibration is stored as given on disk (so a
//! load/save round trip is byte-stable) and converted to world-from-camera
//! poses on demand.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use track4d_core::geometry::{CameraIntrinsics, CameraPose, CameraView, WorldPoint};
use track4d_core::linalg::{Mat3, Vec3};
use track4d_core::metrics::{GeometricEntry, GeometricKind, LanguagePair, QuestionType, TurnResult};
use track4d_core::HORIZON;

use crate::{Error, Result};

/// Largest accepted `‖RRᵀ − I‖∞` for a stored rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Rotations closer to orthonormal than this are used verbatim.
const EXACT_ROTATION: f64 = 1e-9;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Short,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrinsicConvention {
    /// `x_cam = R x_world + t`
    #[default]
    CameraFromWorld,
    /// `R` maps camera axes to world axes and `t` is the camera center.
    WorldFromCamera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameCalibration {
    pub t: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewCalibration {
    pub view_id: String,
    pub calib: Vec<FrameCalibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTrajectory {
    pub target_id: String,
    pub points: Vec<WorldPoint>,
    pub valid: Vec<bool>,
    /// Timestamp of each step, when the dataset records it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueTurn {
    pub turn_index: usize,
    pub question: String,
    pub question_type: QuestionType,
    pub answer: String,
    /// Present iff the turn asks for 3D output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<GroundTruthTrajectory>>,
}

impl DialogueTurn {
    pub fn is_geometric(&self) -> bool {
        self.targets.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSample {
    pub clip_id: String,
    pub regime: Regime,
    #[serde(default)]
    pub extrinsic_convention: ExtrinsicConvention,
    pub timestamps: Vec<f64>,
    /// `[start, end]` of the queried sub-segment of a long clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<[f64; 2]>,
    pub views: Vec<ViewCalibration>,
    pub turns: Vec<DialogueTurn>,
}

fn invalid(path: impl Into<String>, msg: impl std::fmt::Display) -> Error {
    Error::Invalid {
        path: path.into(),
        message: msg.to_string(),
    }
}

impl FrameCalibration {
    /// Camera pose in the world-from-camera form, after checking the stored
    /// rotation.
    pub fn pose(&self, convention: ExtrinsicConvention) -> std::result::Result<CameraPose, String> {
        let r = Mat3::from_row_major(&self.rotation);
        if !r.is_finite() || !self.translation.iter().all(|v| v.is_finite()) {
            return Err("non-finite extrinsics".into());
        }
        let err = r.orthonormality_error();
        if err > ROTATION_TOLERANCE {
            return Err(format!("rotation is not orthonormal (‖RRᵀ−I‖∞ = {err:.3e})"));
        }
        let r = if err > EXACT_ROTATION { r.orthonormalized() } else { r };
        if r.determinant() <= 0.0 {
            return Err("rotation has negative determinant".into());
        }
        let t = Vec3::new(self.translation[0], self.translation[1], self.translation[2]);
        match convention {
            ExtrinsicConvention::CameraFromWorld => CameraPose::from_camera_from_world(r, t),
            ExtrinsicConvention::WorldFromCamera => CameraPose::new(r, t),
        }
        .map_err(|e| e.to_string())
    }

    pub fn intrinsics(&self) -> std::result::Result<CameraIntrinsics, String> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy).map_err(|e| e.to_string())
    }
}

impl ClipSample {
    /// Checks every invariant; the error names the first violation by JSON
    /// path.
    pub fn validate(&self) -> Result<()> {
        if self.clip_id.is_empty() {
            return Err(invalid("clip_id", "must be nonempty"));
        }
        if self.timestamps.is_empty() {
            return Err(invalid("timestamps", "must be nonempty"));
        }
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(invalid(
                    format!("timestamps[{}]", i + 1),
                    format!("timestamps must be strictly increasing ({} after {})", w[1], w[0]),
                ));
            }
        }
        if let Some(t) = self.timestamps.iter().find(|t| !t.is_finite()) {
            return Err(invalid("timestamps", format!("non-finite timestamp {t}")));
        }
        if let Some([a, b]) = self.segment {
            if !(a <= b) {
                return Err(invalid("segment", "start must not exceed end"));
            }
        }
        if self.views.is_empty() {
            return Err(invalid("views", "at least one view is required"));
        }
        let mut ids = BTreeSet::new();
        for (vi, view) in self.views.iter().enumerate() {
            if !ids.insert(&view.view_id) {
                return Err(invalid(format!("views[{vi}].view_id"), format!("duplicate view {:?}", view.view_id)));
            }
            for (ci, c) in view.calib.iter().enumerate() {
                let path = format!("views[{vi}].calib[{ci}]");
                if !self.has_timestamp(c.t) {
                    return Err(invalid(
                        format!("{path}.t"),
                        format!("dangling calibration reference: view {:?} at t = {} is not a clip timestamp", view.view_id, c.t),
                    ));
                }
                c.intrinsics().map_err(|m| invalid(&path, m))?;
                c.pose(self.extrinsic_convention).map_err(|m| {
                    invalid(format!("{path}.rotation"), format!("view {:?} at t = {}: {m}", view.view_id, c.t))
                })?;
            }
        }
        for (k, turn) in self.turns.iter().enumerate() {
            let path = format!("turns[{k}]");
            if turn.turn_index != k + 1 {
                return Err(invalid(
                    format!("{path}.turn_index"),
                    format!("turn indices must be dense from 1 (expected {}, found {})", k + 1, turn.turn_index),
                ));
            }
            let Some(targets) = &turn.targets else { continue };
            if targets.is_empty() {
                return Err(invalid(format!("{path}.targets"), "geometric payload must list at least one target"));
            }
            for (j, t) in targets.iter().enumerate() {
                let tp = format!("{path}.targets[{j}]");
                if t.points.len() != HORIZON {
                    return Err(invalid(format!("{tp}.points"), format!("expected {HORIZON} points, found {}", t.points.len())));
                }
                if t.valid.len() != HORIZON {
                    return Err(invalid(format!("{tp}.valid"), format!("expected {HORIZON} entries, found {}", t.valid.len())));
                }
                if !t.valid.iter().any(|v| *v) {
                    return Err(invalid(format!("{tp}.valid"), "at least one step must be valid"));
                }
                if t.points.iter().any(|p| !p.is_finite()) {
                    return Err(invalid(format!("{tp}.points"), "non-finite coordinate"));
                }
                if let Some(times) = &t.times {
                    if times.len() != HORIZON {
                        return Err(invalid(format!("{tp}.times"), format!("expected {HORIZON} entries, found {}", times.len())));
                    }
                    for (h, tt) in times.iter().enumerate() {
                        if !self.has_timestamp(*tt) {
                            return Err(invalid(
                                format!("{tp}.times[{h}]"),
                                format!("dangling reference: t = {tt} is not a clip timestamp"),
                            ));
                        }
                        if !self.views.iter().any(|v| v.calib.iter().any(|c| (c.t - tt).abs() <= TIME_EPS)) {
                            return Err(invalid(
                                format!("{tp}.times[{h}]"),
                                format!("dangling calibration reference: no view is calibrated at t = {tt}"),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn has_timestamp(&self, t: f64) -> bool {
        self.timestamps.iter().any(|s| (s - t).abs() <= TIME_EPS)
    }

    /// Calibrated cameras, one per (view, timestamp).
    pub fn camera_views(&self) -> Result<Vec<CameraView>> {
        let mut out = Vec::new();
        for (vi, view) in self.views.iter().enumerate() {
            for (ci, c) in view.calib.iter().enumerate() {
                let path = format!("views[{vi}].calib[{ci}]");
                out.push(CameraView {
                    view_id: view.view_id.clone(),
                    timestamp: c.t,
                    intrinsics: c.intrinsics().map_err(|m| invalid(&path, m))?,
                    pose: c.pose(self.extrinsic_convention).map_err(|m| invalid(&path, m))?,
                });
            }
        }
        Ok(out)
    }

    pub fn frame_count(&self) -> usize {
        self.views.iter().map(|v| v.calib.len()).sum()
    }
}

pub fn parse_clip(text: &str) -> Result<ClipSample> {
    let clip: ClipSample = serde_json::from_str(text).map_err(|e| {
        invalid("$", format!("schema violation at line {} column {}: {e}", e.line(), e.column()))
    })?;
    clip.validate()?;
    Ok(clip)
}

pub fn load_clip(path: &Path) -> Result<ClipSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clip(&text).map_err(|e| e.in_file(path))
}

pub fn clip_to_string(clip: &ClipSample) -> Result<String> {
    let mut s = serde_json::to_string_pretty(clip)?;
    s.push('\n');
    Ok(s)
}

pub fn save_clip(clip: &ClipSample, path: &Path) -> Result<()> {
    clip.validate()?;
    fs::write(path, clip_to_string(clip)?).map_err(|e| Error::io(path, e))
}

/// Clip files in a corpus directory: `*.json` except sidecars and
/// manifests, sorted by file name.
pub fn clip_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let sidecar = name.ends_with(".tokens.json") || name.ends_with(".trace.json");
        if path.is_file() && name.ends_with(".json") && !sidecar && name != "manifest.json" && !name.ends_with(".manifest.json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every clip of a corpus, ordered by clip id.
pub fn load_corpus(dir: &Path) -> Result<Vec<ClipSample>> {
    let mut clips = clip_files(dir)?.iter().map(|p| load_clip(p)).collect::<Result<Vec<_>>>()?;
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    if let Some(w) = clips.windows(2).find(|w| w[0].clip_id == w[1].clip_id) {
        return Err(Error::Data(format!("clip id {:?} appears in more than one file", w[0].clip_id)));
    }
    Ok(clips)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub clips: usize,
    pub frames: usize,
    pub turns: usize,
    pub geometric_turns: usize,
    pub targets: usize,
    pub per_type: BTreeMap<String, usize>,
    /// Files that failed validation, with their diagnostics.
    pub invalid_files: Vec<InvalidFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidFile {
    pub file: String,
    pub error: String,
}

impl CorpusSummary {
    pub fn is_valid(&self) -> bool {
        self.invalid_files.is_empty()
    }

    fn add(&mut self, clip: &ClipSample) {
        self.clips += 1;
        self.frames += clip.frame_count();
        self.turns += clip.turns.len();
        for t in &clip.turns {
            *self.per_type.entry(t.question_type.label().to_string()).or_default() += 1;
            if let Some(targets) = &t.targets {
                self.geometric_turns += 1;
                self.targets += targets.len();
            }
        }
    }
}

/// Validates every clip file, collecting all failures.
pub fn validate_corpus(dir: &Path) -> Result<CorpusSummary> {
    let mut summary = CorpusSummary::default();
    for path in clip_files(dir)? {
        match load_clip(&path) {
            Ok(clip) => summary.add(&clip),
            Err(e) => summary.invalid_files.push(InvalidFile {
                file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                error: e.to_string(),
            }),
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedTrajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    pub points: Vec<WorldPoint>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub anchor: WorldPoint,
    pub attention_entropy: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBlock {
    pub history: String,
    pub slot: Vec<f64>,
    #[serde(default)]
    pub steps: Vec<StepAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub turn_index: usize,
    pub answer: String,
    #[serde(default)]
    pub trajectories: Vec<PredictedTrajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditBlock>,
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Protocol(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Scoring input for every turn of the corpus plus alignment bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub turns: Vec<TurnResult>,
    /// Geometric turns with no prediction record.
    pub missing_geometric_turns: usize,
    /// `(clip, turn)` pairs with no prediction record.
    pub missing: Vec<(String, usize)>,
}

/// Pairs each turn with its prediction record. Predicted trajectories are
/// matched to ground-truth targets by position; absent ones score as misses.
pub fn align_predictions(corpus: &[ClipSample], predictions: &[PredictionRecord]) -> Result<Alignment> {
    let mut by_key: BTreeMap<(&str, usize), &PredictionRecord> = BTreeMap::new();
    for (i, p) in predictions.iter().enumerate() {
        let clip = corpus
            .iter()
            .find(|c| c.clip_id == p.clip_id)
            .ok_or_else(|| Error::Protocol(format!("record {}: unknown clip {:?}", i + 1, p.clip_id)))?;
        let turn = clip
            .turns
            .get(p.turn_index.wrapping_sub(1))
            .ok_or_else(|| Error::Protocol(format!("record {}: clip {:?} has no turn {}", i + 1, p.clip_id, p.turn_index)))?;
        if by_key.insert((&p.clip_id, p.turn_index), p).is_some() {
            return Err(Error::Protocol(format!(
                "record {}: duplicate prediction for clip {:?} turn {}",
                i + 1,
                p.clip_id,
                p.turn_index
            )));
        }
        let expected = turn.targets.as_ref().map_or(0, Vec::len);
        if p.trajectories.len() > expected {
            return Err(Error::Protocol(format!(
                "record {}: clip {:?} turn {} lists {} trajectories but the turn has {expected} targets",
                i + 1,
                p.clip_id,
                p.turn_index,
                p.trajectories.len()
            )));
        }
        for (j, t) in p.trajectories.iter().enumerate() {
            if t.points.len() != HORIZON || t.valid.len() != HORIZON {
                return Err(Error::Protocol(format!(
                    "record {}: trajectory {j} must have {HORIZON} points and mask entries",
                    i + 1
                )));
            }
        }
    }

    let mut order: Vec<&ClipSample> = corpus.iter().collect();
    order.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut out = Alignment {
        turns: Vec::new(),
        missing_geometric_turns: 0,
        missing: Vec::new(),
    };
    for clip in order {
        for turn in &clip.turns {
            let pred = by_key.get(&(clip.clip_id.as_str(), turn.turn_index)).copied();
            if pred.is_none() {
                out.missing.push((clip.clip_id.clone(), turn.turn_index));
                if turn.is_geometric() {
                    out.missing_geometric_turns += 1;
                }
            }
            let kind = turn.question_type.geometric_kind().unwrap_or(GeometricKind::Trajectory);
            let geometric = turn
                .targets
                .iter()
                .flatten()
                .enumerate()
                .map(|(j, gt)| GeometricEntry {
                    kind,
                    prediction: pred.and_then(|p| p.trajectories.get(j)).map(|t| t.points.clone()),
                    target: gt.points.clone(),
                    valid: gt.valid.clone(),
                })
                .collect();
            let language = (!turn.is_geometric()).then(|| LanguagePair {
                hypothesis: track4d_core::metrics::tokenize(pred.map_or("", |p| p.answer.as_str())),
                references: vec![track4d_core::metrics::tokenize(&turn.answer)],
            });
            out.turns.push(TurnResult {
                question_type: turn.question_type,
                geometric,
                language,
                missing: pred.is_none(),
            });
        }
    }
    Ok(out)
}
