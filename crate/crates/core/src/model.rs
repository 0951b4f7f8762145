//! The full parameter set and the per-dialogue rollout.
//!
//! A turn updates the slot from `[s_prev; evidence pool; question]`, derives
//! the query pair from the new slot and, on geometric turns, decodes a
//! trajectory from the conditioned clip tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    step_forward_with_anchor, trajectory_from_caches, DecoderConfig, DecoderParams, Evidence, StepCache,
    TrajectoryPrediction, DEFAULT_HIDDEN,
};
use crate::encoding::{conditioned_feature, FourierTimeConfig, RtgeParams, VisualToken, DEFAULT_NUM_FREQUENCIES};
use crate::geometry::{point_to_ray_distance, PluckerRay, WorldPoint};
use crate::linalg::{axpy, Matrix, Vec3};
use crate::state::{derive_queries, slot_forward, QueryEmbedding, QueryPair, SlotCache, SlotState, SlotUpdateParams};
use crate::{Error, Result, HORIZON};

/// Default token (and slot) dimension.
pub const DEFAULT_TOKEN_DIM: usize = 32;

/// Width of the Gaussian used to turn ground-truth point-to-ray distances
/// into pooling weights in gold-history mode (meters).
pub const GOLD_POOL_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub token_dim: usize,
    pub num_frequencies: usize,
    pub score_hidden: usize,
    pub residual_hidden: usize,
    pub horizon: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            token_dim: DEFAULT_TOKEN_DIM,
            num_frequencies: DEFAULT_NUM_FREQUENCIES,
            score_hidden: DEFAULT_HIDDEN,
            residual_hidden: DEFAULT_HIDDEN,
            horizon: HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub fourier: FourierTimeConfig,
    pub rtge: RtgeParams,
    pub slot: SlotUpdateParams,
    pub w_sem: Matrix,
    pub w_kin: Matrix,
    pub decoder: DecoderParams,
}

// Initialization scales, relative to `1/√fan_in`. Plain fan-in scaling
// leaves the attention near uniform and dilutes the question inside the
// slot update, and plain SGD then takes far longer than the default budget
// to separate targets and timestamps.
const RAY_INIT_GAIN: f64 = 0.1;
const TIME_INIT_GAIN: f64 = 3.0;
const QUERY_INIT_GAIN: f64 = 3.0;
const SCORE_INIT_GAIN: f64 = 3.0;
/// Slot update columns that read the current question.
const SLOT_QUERY_GAIN: f64 = 10.0;
const SLOT_CANDIDATE_GAIN: f64 = 3.0;

impl Model {
    pub fn zeros(dims: ModelDims, fourier: FourierTimeConfig) -> Result<Self> {
        if dims.token_dim == 0 || dims.score_hidden == 0 || dims.residual_hidden == 0 || dims.horizon == 0 {
            return Err(Error::input("model dimensions must be positive"));
        }
        if fourier.num_frequencies() != dims.num_frequencies {
            return Err(Error::dim(
                "Fourier frequencies",
                dims.num_frequencies,
                fourier.num_frequencies(),
            ));
        }
        let d = dims.token_dim;
        let mut decoder = DecoderParams::zeros(d, dims.score_hidden, dims.horizon);
        if dims.residual_hidden != dims.score_hidden {
            decoder.residual = crate::decoder::ResidualHead::zeros(d, dims.residual_hidden);
        }
        Ok(Self {
            rtge: RtgeParams::zeros(d, dims.num_frequencies),
            fourier,
            slot: SlotUpdateParams::zeros(d),
            w_sem: Matrix::zeros(d, d),
            w_kin: Matrix::zeros(d, d),
            decoder,
        })
    }

    /// Seeded uniform initialization. Biases and the residual head's output
    /// layer start at zero, so an untrained model decodes pure anchors.
    pub fn init(dims: ModelDims, fourier: FourierTimeConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(dims, fourier)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |mat: &mut Matrix, gain: f64, rng: &mut ChaCha8Rng| {
            let a = gain / (mat.cols as f64).sqrt();
            mat.data.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        };
        fill(&mut m.rtge.ray_projection, RAY_INIT_GAIN, &mut rng);
        fill(&mut m.rtge.time_projection, TIME_INIT_GAIN, &mut rng);
        fill(&mut m.slot.candidate, SLOT_CANDIDATE_GAIN, &mut rng);
        fill(&mut m.slot.gate, 1.0, &mut rng);
        let d = dims.token_dim;
        for mat in [&mut m.slot.candidate, &mut m.slot.gate] {
            for r in 0..mat.rows {
                mat.data[r * mat.cols + 2 * d..(r + 1) * mat.cols].iter_mut().for_each(|v| *v *= SLOT_QUERY_GAIN);
            }
        }
        fill(&mut m.w_sem, QUERY_INIT_GAIN, &mut rng);
        fill(&mut m.w_kin, QUERY_INIT_GAIN, &mut rng);
        for head in &mut m.decoder.score_heads {
            fill(&mut head.w1, SCORE_INIT_GAIN, &mut rng);
            let a = SCORE_INIT_GAIN / (head.w2.len() as f64).sqrt();
            head.w2.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        }
        fill(&mut m.decoder.residual.w1, 1.0, &mut rng);
        Ok(m)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            token_dim: self.token_dim(),
            num_frequencies: self.fourier.num_frequencies(),
            score_hidden: self.decoder.score_heads.first().map_or(0, |h| h.b1.len()),
            residual_hidden: self.decoder.residual.b1.len(),
            horizon: self.decoder.horizon(),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.rtge.token_dim()
    }

    /// Same shapes, all parameters zero (the gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, values) in z.blocks_mut() {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        self.rtge.validate(&self.fourier)?;
        let d = self.token_dim();
        if self.slot.dim() != d {
            return Err(Error::dim("slot dimension", d, self.slot.dim()));
        }
        for (what, m) in [("semantic query weights", &self.w_sem), ("kinematic query weights", &self.w_kin)] {
            if m.rows != d || m.cols != d {
                return Err(Error::dim(what, d * d, m.rows * m.cols));
            }
        }
        if self.decoder.token_dim() != d {
            return Err(Error::dim("decoder token dimension", d, self.decoder.token_dim()));
        }
        self.decoder.validate()
    }

    /// Named parameter blocks in the fixed serialization order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("rtge.ray_projection".into(), &self.rtge.ray_projection.data[..]),
            ("rtge.ray_bias".into(), &self.rtge.ray_bias[..]),
            ("rtge.time_projection".into(), &self.rtge.time_projection.data[..]),
            ("rtge.time_bias".into(), &self.rtge.time_bias[..]),
            ("slot.candidate".into(), &self.slot.candidate.data[..]),
            ("slot.candidate_bias".into(), &self.slot.candidate_bias[..]),
            ("slot.gate".into(), &self.slot.gate.data[..]),
            ("slot.gate_bias".into(), &self.slot.gate_bias[..]),
            ("query.w_sem".into(), &self.w_sem.data[..]),
            ("query.w_kin".into(), &self.w_kin.data[..]),
        ];
        for (h, head) in self.decoder.score_heads.iter().enumerate() {
            out.push((format!("score.{}.w1", h + 1), &head.w1.data[..]));
            out.push((format!("score.{}.b1", h + 1), &head.b1[..]));
            out.push((format!("score.{}.w2", h + 1), &head.w2[..]));
            out.push((format!("score.{}.b2", h + 1), core::slice::from_ref(&head.b2)));
        }
        let r = &self.decoder.residual;
        out.push(("residual.w1".into(), &r.w1.data[..]));
        out.push(("residual.b1".into(), &r.b1[..]));
        out.push(("residual.w2".into(), &r.w2.data[..]));
        out.push(("residual.b2".into(), &r.b2[..]));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let Model {
            rtge,
            slot,
            w_sem,
            w_kin,
            decoder,
            ..
        } = self;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("rtge.ray_projection".into(), &mut rtge.ray_projection.data[..]),
            ("rtge.ray_bias".into(), &mut rtge.ray_bias[..]),
            ("rtge.time_projection".into(), &mut rtge.time_projection.data[..]),
            ("rtge.time_bias".into(), &mut rtge.time_bias[..]),
            ("slot.candidate".into(), &mut slot.candidate.data[..]),
            ("slot.candidate_bias".into(), &mut slot.candidate_bias[..]),
            ("slot.gate".into(), &mut slot.gate.data[..]),
            ("slot.gate_bias".into(), &mut slot.gate_bias[..]),
            ("query.w_sem".into(), &mut w_sem.data[..]),
            ("query.w_kin".into(), &mut w_kin.data[..]),
        ];
        let DecoderParams { score_heads, residual } = decoder;
        for (h, head) in score_heads.iter_mut().enumerate() {
            out.push((format!("score.{}.w1", h + 1), &mut head.w1.data[..]));
            out.push((format!("score.{}.b1", h + 1), &mut head.b1[..]));
            out.push((format!("score.{}.w2", h + 1), &mut head.w2[..]));
            out.push((format!("score.{}.b2", h + 1), core::slice::from_mut(&mut head.b2)));
        }
        out.push(("residual.w1".into(), &mut residual.w1.data[..]));
        out.push(("residual.b1".into(), &mut residual.b1[..]));
        out.push(("residual.w2".into(), &mut residual.w2.data[..]));
        out.push(("residual.b2".into(), &mut residual.b2[..]));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, v)| v.len()).sum()
    }

    /// All parameters concatenated in block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if flat.len() != n {
            return Err(Error::dim("flat parameter vector", n, flat.len()));
        }
        let mut offset = 0;
        for (_, values) in self.blocks_mut() {
            values.copy_from_slice(&flat[offset..offset + values.len()]);
            offset += values.len();
        }
        Ok(())
    }
}

/// Ground truth attached to a geometric turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTarget {
    pub target_id: String,
    pub points: Vec<WorldPoint>,
    pub valid: Vec<bool>,
    /// Timestamp of each step, when known.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
}

impl TurnTarget {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurnSpec {
    pub query: QueryEmbedding,
    /// Present iff the turn asks for a trajectory. Its ground truth is read
    /// only by training and by gold-history pooling.
    pub target: Option<TurnTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub tokens: Vec<VisualToken>,
    pub turns: Vec<DialogueTurnSpec>,
}

/// Source of the previous-turn state fed into each slot update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    /// Zero slot and unweighted evidence mean every turn.
    None,
    /// The model's own slot and attention-pooled evidence.
    #[default]
    #[serde(rename = "self")]
    SelfHistory,
    /// Own slot chain, but evidence after a geometric turn is pooled with the
    /// model's attention masked to the tokens whose rays pass near that
    /// turn's ground-truth points.
    Gold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub slot: SlotState,
    pub evidence_pool: Vec<f64>,
    pub prediction: Option<TrajectoryPrediction>,
}

/// Conditioned features and rays of one clip.
pub(crate) struct ConditionedClip {
    pub features: Vec<Vec<f64>>,
    pub rays: Vec<PluckerRay>,
    pub timestamps: Vec<f64>,
}

impl ConditionedClip {
    pub fn evidence(&self) -> Evidence<'_> {
        Evidence {
            features: &self.features,
            rays: &self.rays,
        }
    }
}

pub(crate) fn condition_clip(model: &Model, tokens: &[VisualToken]) -> Result<ConditionedClip> {
    let d = model.token_dim();
    if tokens.is_empty() {
        return Err(Error::input("clip has no evidence tokens"));
    }
    if let Some(t) = tokens.iter().find(|t| t.feature.len() != d) {
        return Err(Error::dim("token feature", d, t.feature.len()));
    }
    Ok(ConditionedClip {
        features: tokens
            .iter()
            .map(|t| conditioned_feature(&t.feature, &t.ray, t.timestamp, &model.rtge, &model.fourier))
            .collect(),
        rays: tokens.iter().map(|t| t.ray).collect(),
        timestamps: tokens.iter().map(|t| t.timestamp).collect(),
    })
}

/// Previous slot and evidence pool a turn was computed from. Both are
/// constants for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TurnContext {
    pub prev: Vec<f64>,
    pub pool: Vec<f64>,
}

pub(crate) struct TurnCache {
    pub slot_cache: SlotCache,
    pub slot: Vec<f64>,
    pub queries: QueryPair,
    pub steps: Vec<StepCache>,
}

pub(crate) fn turn_forward(
    model: &Model,
    clip: &ConditionedClip,
    ctx: &TurnContext,
    query: &QueryEmbedding,
    geometric: bool,
    cfg: &DecoderConfig,
    frozen_anchors: Option<&[Vec3]>,
) -> TurnCache {
    let (slot, slot_cache) = slot_forward(&ctx.prev, &ctx.pool, &query.vector, &model.slot);
    let queries = QueryPair {
        semantic: model.w_sem.mul_vec(&slot),
        kinematic: model.w_kin.mul_vec(&slot),
    };
    let steps = if geometric {
        let ev = clip.evidence();
        model
            .decoder
            .score_heads
            .iter()
            .enumerate()
            .map(|(h, head)| {
                let frozen = frozen_anchors.map(|a| a[h]);
                step_forward_with_anchor(&queries, &ev, head, &model.decoder.residual, cfg, frozen)
            })
            .collect()
    } else {
        Vec::new()
    };
    TurnCache {
        slot_cache,
        slot,
        queries,
        steps,
    }
}

pub(crate) fn mean_pool(features: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; features.first().map_or(0, Vec::len)];
    let w = 1.0 / features.len() as f64;
    for f in features {
        axpy(&mut out, w, f);
    }
    out
}

/// Mean over steps of the fused step features, using `weights[h]` for step
/// `h`.
pub(crate) fn pooled_evidence(features: &[Vec<f64>], weights: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; features.first().map_or(0, Vec::len)];
    let scale = 1.0 / weights.len() as f64;
    for w in weights {
        for (a, f) in w.iter().zip(features) {
            if *a != 0.0 {
                axpy(&mut out, a * scale, f);
            }
        }
    }
    out
}

/// Attention restricted to the evidence the ground truth supports:
/// `α ⊙ g`, renormalized. `None` when the product vanishes.
fn mask_attention(alpha: &[f64], gold: &[f64]) -> Option<Vec<f64>> {
    let mut w: Vec<f64> = alpha.iter().zip(gold).map(|(a, g)| a * g).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    w.iter_mut().for_each(|v| *v /= total);
    Some(w)
}

/// Per-step pooling weights implied by a ground-truth trajectory: Gaussian in
/// the point-to-ray distance, restricted to tokens at the step's timestamp
/// when it is known. `None` for invalid steps or when no token is close.
pub(crate) fn gold_step_weights(clip: &ConditionedClip, target: &TurnTarget) -> Vec<Option<Vec<f64>>> {
    (0..target.points.len())
        .map(|h| {
            if !target.valid.get(h).copied().unwrap_or(false) {
                return None;
            }
            let p = target.points[h];
            let time = target.times.as_ref().and_then(|t| t.get(h).copied());
            let mut w: Vec<f64> = clip
                .rays
                .iter()
                .zip(&clip.timestamps)
                .map(|(ray, &t)| {
                    if time.is_some_and(|tt| (tt - t).abs() > 1e-9) {
                        return 0.0;
                    }
                    let dist = point_to_ray_distance(p, ray) / GOLD_POOL_WIDTH;
                    (-0.5 * dist * dist).exp()
                })
                .collect();
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return None;
            }
            w.iter_mut().for_each(|v| *v /= total);
            Some(w)
        })
        .collect()
}

/// Runs every turn of a dialogue in order under the given history mode.
pub fn run_dialogue(
    model: &Model,
    sample: &DialogueSample,
    mode: HistoryMode,
    cfg: &DecoderConfig,
) -> Result<Vec<TurnOutcome>> {
    model.validate()?;
    let clip = condition_clip(model, &sample.tokens)?;
    let d = model.token_dim();
    for turn in &sample.turns {
        if turn.query.vector.len() != d {
            return Err(Error::dim("query embedding", d, turn.query.vector.len()));
        }
    }
    let contexts_and_caches = rollout(model, &clip, sample, mode, cfg);
    Ok(contexts_and_caches
        .into_iter()
        .enumerate()
        .map(|(k, (ctx, cache))| TurnOutcome {
            slot: SlotState {
                vector: cache.slot,
                turn_index: k + 1,
            },
            evidence_pool: ctx.pool,
            prediction: (!cache.steps.is_empty()).then(|| trajectory_from_caches(&cache.steps)),
        })
        .collect())
}

/// Sequential forward pass producing each turn's context and cache.
pub(crate) fn rollout(
    model: &Model,
    clip: &ConditionedClip,
    sample: &DialogueSample,
    mode: HistoryMode,
    cfg: &DecoderConfig,
) -> Vec<(TurnContext, TurnCache)> {
    let d = model.token_dim();
    let mean = mean_pool(&clip.features);
    let mut out: Vec<(TurnContext, TurnCache)> = Vec::with_capacity(sample.turns.len());
    let mut prev = vec![0.0; d];
    let mut next_pool = mean.clone();
    for turn in &sample.turns {
        let ctx = match mode {
            HistoryMode::None => TurnContext {
                prev: vec![0.0; d],
                pool: mean.clone(),
            },
            _ => TurnContext {
                prev: prev.clone(),
                pool: next_pool.clone(),
            },
        };
        let cache = turn_forward(model, clip, &ctx, &turn.query, turn.target.is_some(), cfg, None);
        prev = cache.slot.clone();
        next_pool = if cache.steps.is_empty() {
            mean.clone()
        } else {
            match (mode, &turn.target) {
                (HistoryMode::Gold, Some(target)) => {
                    let weights: Vec<Vec<f64>> = gold_step_weights(clip, target)
                        .into_iter()
                        .zip(&cache.steps)
                        .map(|(gold, step)| match gold {
                            Some(g) => mask_attention(&step.alpha, &g).unwrap_or(g),
                            None => step.alpha.clone(),
                        })
                        .collect();
                    pooled_evidence(&clip.features, &weights)
                }
                _ => {
                    let mut pool = vec![0.0; d];
                    let w = 1.0 / cache.steps.len() as f64;
                    for step in &cache.steps {
                        axpy(&mut pool, w, &step.fused);
                    }
                    pool
                }
            }
        };
        out.push((ctx, cache));
    }
    out
}

/// Queries of a slot, re-exported for callers holding only a `Model`.
pub fn model_queries(model: &Model, slot: &SlotState) -> Result<QueryPair> {
    derive_queries(slot, &model.w_sem, &model.w_kin)
}
