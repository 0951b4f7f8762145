//! Synthetic multiview scenes and dialogues with exact ground truth.
//!
//! Cameras sit on a ring facing the arena center. Each target observed by a
//! camera at a timestamp yields one token whose pixel is the (optionally
//! jittered) projection of the target and whose feature is laid out as
//!
//! | channels | content |
//! |---|---|
//! | `0..8` | identity one-hot (target index) |
//! | `8` | camera-to-target range / arena extent |
//! | `9..12` | target position / (arena extent / 2) |
//! | rest | zero |
//!
//! plus Gaussian noise `σ_feat` on every channel.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use track4d_core::encoding::PatchObservation;
use track4d_core::geometry::{point_to_ray_distance, weighted_ray_objective, CameraPose, PluckerRay, WorldPoint};
use track4d_core::linalg::Vec3;
use track4d_core::metrics::QuestionType;
use track4d_core::HORIZON;

use crate::bench::{ClipSample, DialogueTurn, ExtrinsicConvention, FrameCalibration, GroundTruthTrajectory, Regime, ViewCalibration};
use crate::{Error, Result};

/// Name and version of the pseudo-random generator behind every draw.
pub const GENERATOR: &str = "chacha8-v1";
pub const GRAVITY: f64 = 9.81;
pub const IDENTITY_CHANNELS: usize = 8;
pub const RANGE_CHANNEL: usize = 8;
pub const POSITION_CHANNELS: [usize; 3] = [9, 10, 11];
pub const MIN_FEATURE_DIM: usize = 12;
pub const TARGET_NAMES: [&str; IDENTITY_CHANNELS] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"];

const IMAGE_WIDTH: f64 = 1280.0;
const IMAGE_HEIGHT: f64 = 720.0;
const FOCAL: f64 = 800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    ConstantVelocity,
    Ballistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub num_views: usize,
    pub num_timestamps: usize,
    /// Seconds between consecutive timestamps.
    pub frame_interval: f64,
    pub num_targets: usize,
    pub motion: MotionModel,
    pub sigma_feat: f64,
    /// Per-axis angular ray jitter (radians).
    pub sigma_ray: f64,
    /// Side length of the square arena (meters), centred on the origin.
    pub arena_extent: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub feature_dim: usize,
    pub distractors_per_frame: usize,
    /// Probability of dropping each target token.
    pub dropout: f64,
    /// Horizontal target speed range (m/s).
    pub speed: [f64; 2],
    pub regime: Regime,
    /// Fraction of the timeline forming the queried segment of long clips.
    pub segment_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_views: 4,
            num_timestamps: 4,
            frame_interval: 0.5,
            num_targets: 3,
            motion: MotionModel::ConstantVelocity,
            sigma_feat: 0.0,
            sigma_ray: 0.0,
            arena_extent: 10.0,
            camera_radius: 12.0,
            camera_height: 4.0,
            feature_dim: 32,
            distractors_per_frame: 1,
            dropout: 0.0,
            speed: [0.5, 1.5],
            regime: Regime::Short,
            segment_fraction: 0.25,
        }
    }
}

fn config_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(config_error("num_views", "at least one view is required"));
        }
        if self.num_timestamps < HORIZON {
            return Err(config_error("num_timestamps", format!("must be at least {HORIZON}")));
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return Err(config_error("frame_interval", "must be positive"));
        }
        if self.num_targets == 0 || self.num_targets > IDENTITY_CHANNELS {
            return Err(config_error("num_targets", format!("must be in 1..={IDENTITY_CHANNELS}")));
        }
        for (name, v) in [("sigma_feat", self.sigma_feat), ("sigma_ray", self.sigma_ray)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_error(name, "must be finite and nonnegative"));
            }
        }
        if !(self.arena_extent > 2.0) {
            return Err(config_error("arena_extent", "must exceed 2 m"));
        }
        if !(self.camera_radius > 0.0) {
            return Err(config_error("camera_radius", "must be positive"));
        }
        if self.feature_dim < MIN_FEATURE_DIM {
            return Err(config_error("feature_dim", format!("must be at least {MIN_FEATURE_DIM}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_error("dropout", "must lie in [0, 1)"));
        }
        if !(self.speed[0] >= 0.0 && self.speed[1] >= self.speed[0]) {
            return Err(config_error("speed", "must be an increasing nonnegative range"));
        }
        if self.motion == MotionModel::Ballistic {
            // launched to land at the end of the clip, so the arc rises g·T²/8
            let duration = (self.num_timestamps - 1) as f64 * self.frame_interval;
            let apex = GRAVITY * duration * duration / 8.0;
            if apex > self.arena_extent / 2.0 {
                return Err(config_error(
                    "motion",
                    format!("a ballistic flight over {duration} s rises {apex:.1} m, more than half the arena extent"),
                ));
            }
        }
        let (a, b) = self.step_span()?;
        if (b - a) % (HORIZON - 1) != 0 {
            return Err(config_error(
                "num_timestamps",
                format!("the queried span covers {} intervals, which must be divisible by {}", b - a, HORIZON - 1),
            ));
        }
        Ok(())
    }

    /// First and last timestamp index of the queried span.
    fn step_span(&self) -> Result<(usize, usize)> {
        let m = self.num_timestamps;
        match self.regime {
            Regime::Short => Ok((0, m - 1)),
            Regime::Long => {
                if !(self.segment_fraction > 0.0 && self.segment_fraction <= 1.0) {
                    return Err(config_error("segment_fraction", "must lie in (0, 1]"));
                }
                let len = ((m as f64) * self.segment_fraction).round() as usize;
                if len < HORIZON {
                    return Err(config_error("segment_fraction", format!("segment must span at least {HORIZON} timestamps")));
                }
                Ok((m - len, m - 1))
            }
        }
    }

    /// Timestamp indices of the `H` trajectory steps.
    pub fn step_indices(&self) -> Result<[usize; HORIZON]> {
        let (a, b) = self.step_span()?;
        let stride = (b - a) / (HORIZON - 1);
        Ok(std::array::from_fn(|h| a + h * stride))
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.num_timestamps).map(|i| i as f64 * self.frame_interval).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DialogueConfig {
    /// Number of turns of each type per dialogue.
    pub type_mix: BTreeMap<QuestionType, usize>,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self {
            type_mix: BTreeMap::from([
                (QuestionType::Identity, 2),
                (QuestionType::Trajectory, 1),
                (QuestionType::MotionTrend, 2),
                (QuestionType::Relation, 1),
                (QuestionType::SceneLevel, 1),
            ]),
        }
    }
}

impl DialogueConfig {
    pub fn count(&self, t: QuestionType) -> usize {
        self.type_mix.get(&t).copied().unwrap_or(0)
    }

    pub fn num_turns(&self) -> usize {
        self.type_mix.values().sum()
    }

    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        if self.count(QuestionType::Identity) > scene.num_targets {
            return Err(config_error(
                "dialogue.type_mix.identity",
                format!("{} identity turns requested but the scene has {} targets", self.count(QuestionType::Identity), scene.num_targets),
            ));
        }
        let named = self.count(QuestionType::Identity) + self.count(QuestionType::Trajectory);
        if self.count(QuestionType::MotionTrend) > 0 && named == 0 {
            return Err(config_error("dialogue.type_mix.motion trend", "referential turns need an identity or trajectory turn to refer to"));
        }
        if self.count(QuestionType::Relation) > 0 && scene.num_targets < 2 {
            return Err(config_error("dialogue.type_mix.relation", "relation turns need at least two targets"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Large enough that the default model generalizes instead of memorizing.
    pub num_clips: usize,
    pub scene: SceneConfig,
    pub dialogue: DialogueConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_clips: 1000,
            scene: SceneConfig::default(),
            dialogue: DialogueConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.dialogue.validate(&self.scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTrace {
    pub target_id: String,
    pub motion: MotionModel,
    /// Position at every clip timestamp.
    pub positions: Vec<WorldPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub clip_id: String,
    pub generator: String,
    pub seed: u64,
    pub clip_index: u64,
    pub timestamps: Vec<f64>,
    pub step_indices: Vec<usize>,
    pub targets: Vec<TargetTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub identity: [usize; 2],
    pub range: usize,
    pub position: [usize; 2],
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            identity: [0, IDENTITY_CHANNELS],
            range: RANGE_CHANNEL,
            position: [POSITION_CHANNELS[0], POSITION_CHANNELS[2] + 1],
        }
    }
}

/// Contents of a `*.tokens.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub clip_id: String,
    pub feature_dim: usize,
    pub layout: FeatureLayout,
    pub observations: Vec<PatchObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub clip: ClipSample,
    pub tokens: TokenFile,
    pub trace: Trace,
}

pub fn clip_id(index: u64) -> String {
    format!("synth-{index:05}")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn clip_rng(seed: u64, clip_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clip_index);
    rng
}

fn sample_motion(cfg: &SceneConfig, rng: &mut ChaCha8Rng, times: &[f64]) -> Result<Vec<WorldPoint>> {
    let half = cfg.arena_extent / 2.0 - 0.5;
    let duration = times[times.len() - 1];
    for _ in 0..1000 {
        let start = Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(0.5..2.0));
        let speed = if cfg.speed[1] > cfg.speed[0] { rng.random_range(cfg.speed[0]..cfg.speed[1]) } else { cfg.speed[0] };
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let v = Vec3::new(speed * heading.cos(), speed * heading.sin(), 0.0);
        let vz = match cfg.motion {
            MotionModel::ConstantVelocity => 0.0,
            MotionModel::Ballistic => GRAVITY * duration / 2.0,
        };
        let positions: Vec<WorldPoint> = times
            .iter()
            .map(|&t| {
                let drop = match cfg.motion {
                    MotionModel::ConstantVelocity => 0.0,
                    MotionModel::Ballistic => vz * t - 0.5 * GRAVITY * t * t,
                };
                start + v * t + Vec3::new(0.0, 0.0, drop)
            })
            .collect();
        if positions.iter().all(|p| p.x.abs() <= half && p.y.abs() <= half) {
            return Ok(positions);
        }
    }
    Err(config_error("speed", "targets cannot stay inside the arena over the clip"))
}

fn camera_calibrations(cfg: &SceneConfig, times: &[f64]) -> Result<Vec<ViewCalibration>> {
    let focus = Vec3::new(0.0, 0.0, 1.0);
    (0..cfg.num_views)
        .map(|v| {
            let angle = std::f64::consts::TAU * v as f64 / cfg.num_views as f64;
            let center = Vec3::new(cfg.camera_radius * angle.cos(), cfg.camera_radius * angle.sin(), cfg.camera_height);
            let pose = CameraPose::look_at(center, focus, Vec3::new(0.0, 0.0, 1.0))?;
            let (r, t) = pose.camera_from_world();
            let frame = |t_s: f64| FrameCalibration {
                t: t_s,
                fx: FOCAL,
                fy: FOCAL,
                cx: IMAGE_WIDTH / 2.0,
                cy: IMAGE_HEIGHT / 2.0,
                rotation: r.to_row_major(),
                translation: t.to_array(),
            };
            Ok(ViewCalibration {
                view_id: format!("cam{}", v + 1),
                calib: times.iter().map(|&s| frame(s)).collect(),
            })
        })
        .collect()
}

/// Direction rotated by a small random angle with per-axis std `sigma`.
fn jitter(d: Vec3, sigma: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    if sigma == 0.0 {
        return d;
    }
    let helper = if d.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
    let e1 = d.cross(helper);
    let e1 = e1 * (1.0 / e1.norm());
    let e2 = d.cross(e1);
    let out = d + e1 * (sigma * normal(rng)) + e2 * (sigma * normal(rng));
    out * (1.0 / out.norm())
}

/// Builds the scene of clip `clip_index` (no dialogue turns yet) and returns
/// the generator positioned for dialogue sampling.
pub fn gen_scene(cfg: &SceneConfig, clip_index: u64) -> Result<(SyntheticScene, ChaCha8Rng)> {
    cfg.validate()?;
    let mut rng = clip_rng(cfg.seed, clip_index);
    let times = cfg.timestamps();
    let steps = cfg.step_indices()?;
    let id = clip_id(clip_index);
    let segment = (cfg.regime == Regime::Long).then(|| [times[steps[0]], times[steps[HORIZON - 1]]]);
    let clip = ClipSample {
        clip_id: id.clone(),
        regime: cfg.regime,
        extrinsic_convention: ExtrinsicConvention::CameraFromWorld,
        timestamps: times.clone(),
        segment,
        views: camera_calibrations(cfg, &times)?,
        turns: Vec::new(),
    };
    let cameras = clip.camera_views()?;

    let mut targets = Vec::with_capacity(cfg.num_targets);
    for name in TARGET_NAMES.iter().take(cfg.num_targets) {
        targets.push(TargetTrace {
            target_id: (*name).to_string(),
            motion: cfg.motion,
            positions: sample_motion(cfg, &mut rng, &times)?,
        });
    }

    let d = cfg.feature_dim;
    let half = cfg.arena_extent / 2.0;
    let mut observations = Vec::new();
    let mut patch_id = 0u32;
    for (ti, &t) in times.iter().enumerate() {
        for target in &targets {
            let p = target.positions[ti];
            let visible = cameras
                .iter()
                .filter(|c| (c.timestamp - t).abs() < 1e-12)
                .any(|c| c.pose.world_to_camera(p).z > 0.0);
            if !visible {
                return Err(Error::Config(format!("target {} at t = {t} lies behind every camera", target.target_id)));
            }
        }
        for cam in cameras.iter().filter(|c| (c.timestamp - t).abs() < 1e-12) {
            let center = cam.pose.center();
            for (k, target) in targets.iter().enumerate() {
                let p = target.positions[ti];
                let drop = cfg.dropout > 0.0 && rng.random_bool(cfg.dropout);
                let offset = p - center;
                let range = offset.norm();
                let dir = jitter(offset * (1.0 / range), cfg.sigma_ray, &mut rng);
                let Some((u, v)) = cam.project(center + dir * range) else { continue };
                let mut feature = vec![0.0; d];
                feature[k] = 1.0;
                feature[RANGE_CHANNEL] = range / cfg.arena_extent;
                for (c, x) in POSITION_CHANNELS.iter().zip(p.to_array()) {
                    feature[*c] = x / half;
                }
                if cfg.sigma_feat > 0.0 {
                    feature.iter_mut().for_each(|f| *f += cfg.sigma_feat * normal(&mut rng));
                }
                if drop {
                    continue;
                }
                observations.push(PatchObservation {
                    view_id: cam.view_id.clone(),
                    patch_id,
                    timestamp: t,
                    pixel: [u, v],
                    feature,
                });
                patch_id += 1;
            }
            for _ in 0..cfg.distractors_per_frame {
                let pixel = [rng.random_range(0.0..IMAGE_WIDTH), rng.random_range(0.0..IMAGE_HEIGHT)];
                let mut feature = vec![0.0; d];
                feature[RANGE_CHANNEL] = rng.random_range(0.2..2.0);
                for c in POSITION_CHANNELS {
                    feature[c] = rng.random_range(-1.0..1.0);
                }
                if cfg.sigma_feat > 0.0 {
                    feature.iter_mut().for_each(|f| *f += cfg.sigma_feat * normal(&mut rng));
                }
                observations.push(PatchObservation {
                    view_id: cam.view_id.clone(),
                    patch_id,
                    timestamp: t,
                    pixel,
                    feature,
                });
                patch_id += 1;
            }
        }
    }
    let trace = Trace {
        clip_id: id.clone(),
        generator: GENERATOR.into(),
        seed: cfg.seed,
        clip_index,
        timestamps: times,
        step_indices: steps.to_vec(),
        targets,
    };
    let tokens = TokenFile {
        clip_id: id,
        feature_dim: d,
        layout: FeatureLayout::default(),
        observations,
    };
    Ok((SyntheticScene { clip, tokens, trace }, rng))
}

fn fmt_point(p: WorldPoint) -> String {
    format!("({:.2}, {:.2}, {:.2})", p.x, p.y, p.z)
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 9] = ["no", "one", "two", "three", "four", "five", "six", "seven", "eight"];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| (*w).to_string())
}

fn heading_word(v: Vec3) -> &'static str {
    if v.x.abs() >= v.y.abs() {
        if v.x >= 0.0 { "east" } else { "west" }
    } else if v.y >= 0.0 {
        "north"
    } else {
        "south"
    }
}

#[derive(Debug, Clone, Copy)]
enum TurnPlan {
    Identity { target: usize, at_end: bool },
    Trajectory { target: usize },
    MotionTrend { target: usize },
    Relation { a: usize, b: usize, view: usize },
    SceneLevel,
}

fn plan_dialogue(cfg: &DialogueConfig, scene: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<TurnPlan> {
    let n = scene.num_targets;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chains: Vec<Vec<TurnPlan>> = Vec::new();
    for &target in order.iter().take(cfg.count(QuestionType::Identity)) {
        let at_end = rng.random_bool(0.5);
        chains.push(vec![TurnPlan::Identity { target, at_end }]);
    }
    for _ in 0..cfg.count(QuestionType::Trajectory) {
        chains.push(vec![TurnPlan::Trajectory {
            target: rng.random_range(0..n),
        }]);
    }
    let named = chains.len();
    for _ in 0..cfg.count(QuestionType::MotionTrend) {
        let c = rng.random_range(0..named);
        let target = match chains[c][0] {
            TurnPlan::Identity { target, .. } | TurnPlan::Trajectory { target } => target,
            _ => unreachable!("chains start with a named turn"),
        };
        chains[c].push(TurnPlan::MotionTrend { target });
    }
    for _ in 0..cfg.count(QuestionType::Relation) {
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        chains.push(vec![TurnPlan::Relation {
            a,
            b,
            view: rng.random_range(0..scene.num_views),
        }]);
    }
    for _ in 0..cfg.count(QuestionType::SceneLevel) {
        chains.push(vec![TurnPlan::SceneLevel]);
    }
    chains.shuffle(rng);
    chains.into_iter().flatten().collect()
}

/// Appends templated turns to a generated scene.
pub fn gen_dialogue(scene: &mut SyntheticScene, scene_cfg: &SceneConfig, cfg: &DialogueConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate(scene_cfg)?;
    let steps = scene_cfg.step_indices()?;
    let times: Vec<f64> = steps.iter().map(|&i| scene.trace.timestamps[i]).collect();
    let targets = &scene.trace.targets;
    let step_points = |k: usize| -> Vec<WorldPoint> { steps.iter().map(|&i| targets[k].positions[i]).collect() };
    let gt = |k: usize, valid: [bool; HORIZON]| GroundTruthTrajectory {
        target_id: targets[k].target_id.clone(),
        points: step_points(k),
        valid: valid.to_vec(),
        times: Some(times.clone()),
    };
    let segment = if scene_cfg.regime == Regime::Long { " during the final segment" } else { "" };
    let cameras = scene.clip.camera_views()?;
    for plan in plan_dialogue(cfg, scene_cfg, rng) {
        let turn_index = scene.clip.turns.len() + 1;
        let (question_type, question, answer, payload) = match plan {
            TurnPlan::Identity { target, at_end } => {
                let h = if at_end { HORIZON - 1 } else { 0 };
                let mut valid = [false; HORIZON];
                valid[h] = true;
                let name = &targets[target].target_id;
                let when = if at_end { "end" } else { "start" };
                (
                    QuestionType::Identity,
                    format!("Where is the {name} target at the {when}{segment}?"),
                    format!("The {name} target is at {}.", fmt_point(step_points(target)[h])),
                    Some(vec![gt(target, valid)]),
                )
            }
            TurnPlan::Trajectory { target } => {
                let name = &targets[target].target_id;
                let pts = step_points(target);
                (
                    QuestionType::Trajectory,
                    format!("Track the {name} target{segment}."),
                    format!("The {name} target moves from {} to {}.", fmt_point(pts[0]), fmt_point(pts[HORIZON - 1])),
                    Some(vec![gt(target, [true; HORIZON])]),
                )
            }
            TurnPlan::MotionTrend { target } => {
                let pts = step_points(target);
                let v = (pts[HORIZON - 1] - pts[0]) * (1.0 / (times[HORIZON - 1] - times[0]));
                let speed = (v.x * v.x + v.y * v.y).sqrt();
                (
                    QuestionType::MotionTrend,
                    format!("How does it move{segment}?"),
                    format!("It heads {} at about {speed:.1} meters per second.", heading_word(v)),
                    Some(vec![gt(target, [true; HORIZON])]),
                )
            }
            TurnPlan::Relation { a, b, view } => {
                let cam = cameras
                    .iter()
                    .find(|c| c.view_id == scene.clip.views[view].view_id)
                    .expect("view exists");
                let t0 = steps[0];
                let da = (targets[a].positions[t0] - cam.pose.center()).norm();
                let db = (targets[b].positions[t0] - cam.pose.center()).norm();
                let winner = if da <= db { a } else { b };
                let (na, nb) = (&targets[a].target_id, &targets[b].target_id);
                (
                    QuestionType::Relation,
                    format!("Which is closer to camera {}, the {na} target or the {nb} target?", view + 1),
                    format!("The {} target is closer to camera {}.", targets[winner].target_id, view + 1),
                    None,
                )
            }
            TurnPlan::SceneLevel => (
                QuestionType::SceneLevel,
                "How many targets move through the scene?".to_string(),
                format!("{} targets move through the scene.", capitalize(&count_word(targets.len()))),
                None,
            ),
        };
        scene.clip.turns.push(DialogueTurn {
            turn_index,
            question,
            question_type,
            answer,
            targets: payload,
        });
    }
    Ok(())
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

/// Scene plus dialogue for clip `clip_index` of a corpus.
pub fn generate_clip(cfg: &CorpusConfig, clip_index: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (mut scene, mut rng) = gen_scene(&cfg.scene, clip_index)?;
    gen_dialogue(&mut scene, &cfg.scene, &cfg.dialogue, &mut rng)?;
    Ok(scene)
}

/// Dense grid search over `[-extent, extent]³` followed by coordinate-descent
/// refinement until the updates fall below 1e-13.
pub fn brute_force_triangulate(rays: &[PluckerRay], weights: &[f64], grid_extent: f64, grid_step: f64) -> Result<WorldPoint> {
    if rays.is_empty() || rays.len() != weights.len() {
        return Err(Error::Config("need matching, nonempty rays and weights".into()));
    }
    if !(grid_extent > 0.0 && grid_step > 0.0) {
        return Err(Error::Config("grid extent and step must be positive".into()));
    }
    let n = (grid_extent / grid_step).round() as i64;
    let f = |p: WorldPoint| weighted_ray_objective(p, rays, weights);
    let mut best = (f64::INFINITY, [0i64; 3]);
    let mut interior = (f64::INFINITY, [0i64; 3]);
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let p = Vec3::new(i as f64, j as f64, k as f64) * grid_step;
                let v = f(p);
                if v < best.0 {
                    best = (v, [i, j, k]);
                }
                if v < interior.0 && [i, j, k].iter().all(|c| c.abs() < n) {
                    interior = (v, [i, j, k]);
                }
            }
        }
    }
    // Every line through the box passes within √3/2 grid steps of a grid
    // point, so an interior value this close to the boundary one is a tie
    // (a degenerate optimum along a ray), not a minimum beyond the grid.
    let tie = 0.75 * grid_step * grid_step * weights.iter().map(|w| w.abs()).sum::<f64>();
    if interior.0 > best.0 + tie {
        return Err(Error::Config(format!("optimum lies on the grid boundary (extent {grid_extent})")));
    }
    let best = interior;
    let mut p = Vec3::new(best.1[0] as f64, best.1[1] as f64, best.1[2] as f64) * grid_step;
    // Coordinate descent. The objective is quadratic along each axis, so a
    // parabola through three samples gives the exact axis minimum.
    let axes = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
    let h = grid_step;
    for _ in 0..100_000 {
        let mut largest: f64 = 0.0;
        for axis in axes {
            let (up, mid, down) = (f(p + axis * h), f(p), f(p - axis * h));
            let curvature = (up + down - 2.0 * mid) / (h * h);
            if curvature > 0.0 {
                let delta = -(up - down) / (2.0 * h * curvature);
                p += axis * delta;
                largest = largest.max(delta.abs());
            }
        }
        if largest < 1e-13 {
            break;
        }
    }
    Ok(p)
}

/// Distance from `p` to the nearest ray, for tests of single-ray optima.
pub fn nearest_ray_distance(p: WorldPoint, rays: &[PluckerRay]) -> f64 {
    rays.iter().map(|r| point_to_ray_distance(p, r)).fold(f64::INFINITY, f64::min)
}
