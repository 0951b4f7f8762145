//! Anchor-plus-residual trajectory decoder.
//!
//! For each step `h` a step-specific score head rates every retained
//! evidence token from `[q_sem; q_kin; f̃_r]`; the softmax weights drive both
//! the fused step feature and a weighted least-squares intersection of the
//! token rays (the anchor). A residual head then refines the anchor from
//! `[fused; anchor]`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::encoding::ConditionedToken;
use crate::geometry::{condition_ratio, normal_system, PluckerRay, WorldPoint, DEGENERACY_THRESHOLD};
use crate::linalg::{add_into, axpy, dot, Mat3, Matrix, Vec3};
use crate::state::{derive_queries, QueryPair, SlotState};
use crate::{Error, Result};

/// Hidden width shared by the score heads and the residual head by default.
pub const DEFAULT_HIDDEN: usize = 32;

/// Two-layer scorer `w2 · tanh(W1 [q_sem; q_kin; f̃] + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHead {
    /// `hidden × 3d`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ScoreHead {
    pub fn zeros(token_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, 3 * token_dim),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }
}

/// `Δ = W2 tanh(W1 [fused; anchor] + b1) + b2`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualHead {
    /// `hidden × (d + 3)`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `3 × hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ResidualHead {
    pub fn zeros(token_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, token_dim + 3),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(3, hidden),
            b2: vec![0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// One head per step; the horizon is `score_heads.len()`.
    pub score_heads: Vec<ScoreHead>,
    pub residual: ResidualHead,
}

impl DecoderParams {
    pub fn zeros(token_dim: usize, hidden: usize, horizon: usize) -> Self {
        Self {
            score_heads: (0..horizon).map(|_| ScoreHead::zeros(token_dim, hidden)).collect(),
            residual: ResidualHead::zeros(token_dim, hidden),
        }
    }

    pub fn horizon(&self) -> usize {
        self.score_heads.len()
    }

    pub fn token_dim(&self) -> usize {
        self.residual.w1.cols - 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.score_heads.is_empty() {
            return Err(Error::input("decoder needs at least one step head"));
        }
        let d = self.token_dim();
        for head in &self.score_heads {
            let hid = head.b1.len();
            if head.w1.rows != hid || head.w2.len() != hid {
                return Err(Error::dim("score head hidden width", hid, head.w1.rows));
            }
            if head.w1.cols != 3 * d {
                return Err(Error::dim("score head input", 3 * d, head.w1.cols));
            }
        }
        let r = &self.residual;
        let hid = r.b1.len();
        if r.w1.rows != hid || r.w2.cols != hid {
            return Err(Error::dim("residual hidden width", hid, r.w2.cols));
        }
        if r.w2.rows != 3 || r.b2.len() != 3 {
            return Err(Error::dim("residual output", 3, r.w2.rows));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Keep only the `R` highest-scoring tokens per step (softmax renormalized
    /// over the survivors). `None` keeps every token.
    #[serde(default)]
    pub top_r: Option<usize>,
    /// Block gradients through the anchor solve.
    #[serde(default)]
    pub detach_anchor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    /// 1-based step index.
    pub step: usize,
    pub weights: Vec<f64>,
}

impl StepAttention {
    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.weights
            .iter()
            .filter(|&&a| a > 0.0)
            .map(|&a| -a * a.ln())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub anchor: WorldPoint,
    pub refined: WorldPoint,
    pub attention: StepAttention,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub points: Vec<WorldPoint>,
    pub anchors: Vec<WorldPoint>,
    pub attention: Vec<StepAttention>,
    pub degenerate_fallback_used: Vec<bool>,
}

impl TrajectoryPrediction {
    pub fn horizon(&self) -> usize {
        self.points.len()
    }
}

/// Forward values of one decoder step, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    /// hidden activations per token (`None` for truncated tokens)
    pub score_hidden: Vec<Option<Vec<f64>>>,
    pub alpha: Vec<f64>,
    pub fused: Vec<f64>,
    pub anchor: Vec3,
    pub fallback: bool,
    /// normal matrix of the weighted intersection (non-fallback steps)
    pub normal: Mat3,
    pub residual_input: Vec<f64>,
    pub residual_hidden: Vec<f64>,
    pub refined: Vec3,
}

/// Borrowed view of the evidence set used by the decoder internals.
pub(crate) struct Evidence<'a> {
    pub features: &'a [Vec<f64>],
    pub rays: &'a [PluckerRay],
}

fn check_step(step: usize, params: &DecoderParams) -> Result<()> {
    if step == 0 || step > params.horizon() {
        return Err(Error::input(alloc::format!(
            "step {step} outside 1..={}",
            params.horizon()
        )));
    }
    Ok(())
}

fn check_tokens(queries: &QueryPair, tokens: &[ConditionedToken], params: &DecoderParams) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("decoder needs at least one evidence token"));
    }
    let d = params.token_dim();
    if queries.semantic.len() != d || queries.kinematic.len() != d {
        return Err(Error::dim("decoder queries", d, queries.semantic.len()));
    }
    if let Some(t) = tokens.iter().find(|t| t.feature.len() != d) {
        return Err(Error::dim("conditioned token", d, t.feature.len()));
    }
    Ok(())
}

/// Logits and hidden activations of a score head for every token.
fn score_logits(queries: &QueryPair, features: &[Vec<f64>], head: &ScoreHead) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = queries.semantic.len();
    let hid = head.b1.len();
    // query part of the first layer is shared by all tokens
    let mut base = head.b1.clone();
    for (k, b) in base.iter_mut().enumerate() {
        let row = head.w1.row(k);
        *b += dot(&row[..d], &queries.semantic) + dot(&row[d..2 * d], &queries.kinematic);
    }
    let mut logits = Vec::with_capacity(features.len());
    let mut hidden = Vec::with_capacity(features.len());
    for f in features {
        let h: Vec<f64> = (0..hid)
            .map(|k| (base[k] + dot(&head.w1.row(k)[2 * d..], f)).tanh())
            .collect();
        logits.push(dot(&head.w2, &h) + head.b2);
        hidden.push(h);
    }
    (logits, hidden)
}

/// Softmax with max subtraction over the `keep` mask.
fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(z, &k)| if k { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|a| *a /= total);
    out
}

fn retained(logits: &[f64], top_r: Option<usize>) -> Vec<bool> {
    match top_r {
        Some(r) if r < logits.len() => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            let mut keep = vec![false; logits.len()];
            for &i in order.iter().take(r.max(1)) {
                keep[i] = true;
            }
            keep
        }
        _ => vec![true; logits.len()],
    }
}

fn weighted_sum(alpha: &[f64], features: &[Vec<f64>]) -> Vec<f64> {
    let mut fused = vec![0.0; features.first().map_or(0, Vec::len)];
    for (a, f) in alpha.iter().zip(features) {
        if *a != 0.0 {
            axpy(&mut fused, *a, f);
        }
    }
    fused
}

/// Anchor and its normal matrix; falls back to the weighted mean of origins
/// when the bundle is degenerate.
fn anchor_point(rays: &[PluckerRay], alpha: &[f64]) -> (Vec3, Mat3, bool) {
    let (a, b) = normal_system(rays, alpha);
    if condition_ratio(&a) >= DEGENERACY_THRESHOLD {
        if let Some(p) = a.solve_spd(b) {
            return (p, a, false);
        }
    }
    let mean = rays
        .iter()
        .zip(alpha)
        .fold(Vec3::ZERO, |acc, (r, &w)| acc + r.origin() * w);
    (mean, a, true)
}

pub(crate) fn step_forward(
    queries: &QueryPair,
    evidence: &Evidence<'_>,
    head: &ScoreHead,
    residual: &ResidualHead,
    cfg: &DecoderConfig,
) -> StepCache {
    step_forward_with_anchor(queries, evidence, head, residual, cfg, None)
}

/// As [`step_forward`], optionally substituting a fixed anchor for the ray
/// intersection (used to evaluate losses with the anchor held constant).
pub(crate) fn step_forward_with_anchor(
    queries: &QueryPair,
    evidence: &Evidence<'_>,
    head: &ScoreHead,
    residual: &ResidualHead,
    cfg: &DecoderConfig,
    fixed_anchor: Option<Vec3>,
) -> StepCache {
    let (logits, hidden) = score_logits(queries, evidence.features, head);
    let keep = retained(&logits, cfg.top_r);
    let alpha = masked_softmax(&logits, &keep);
    let fused = weighted_sum(&alpha, evidence.features);
    let (mut anchor, normal, fallback) = anchor_point(evidence.rays, &alpha);
    if let Some(p) = fixed_anchor {
        anchor = p;
    }

    let mut residual_input = fused.clone();
    residual_input.extend_from_slice(&anchor.to_array());
    let mut residual_hidden = residual.w1.mul_vec(&residual_input);
    add_into(&mut residual_hidden, &residual.b1);
    residual_hidden.iter_mut().for_each(|v| *v = v.tanh());
    let mut delta = residual.w2.mul_vec(&residual_hidden);
    add_into(&mut delta, &residual.b2);
    let refined = anchor + Vec3::new(delta[0], delta[1], delta[2]);

    let score_hidden = hidden
        .into_iter()
        .zip(&keep)
        .map(|(h, &k)| k.then_some(h))
        .collect();
    StepCache {
        score_hidden,
        alpha,
        fused,
        anchor,
        fallback,
        normal,
        residual_input,
        residual_hidden,
        refined,
    }
}

/// Gradients flowing out of one decoder step.
pub(crate) struct StepGrads {
    pub semantic: Vec<f64>,
    pub kinematic: Vec<f64>,
    /// `∂L/∂f̃_r` per token
    pub features: Vec<Vec<f64>>,
}

/// Backpropagates `∂L/∂refined` (and an optional direct `∂L/∂anchor`)
/// through one step, accumulating head gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_backward(
    grad_refined: Vec3,
    queries: &QueryPair,
    evidence: &Evidence<'_>,
    cache: &StepCache,
    head: &ScoreHead,
    residual: &ResidualHead,
    cfg: &DecoderConfig,
    head_grads: &mut ScoreHead,
    residual_grads: &mut ResidualHead,
) -> StepGrads {
    let d = queries.semantic.len();
    let n = evidence.features.len();

    // residual head
    let g_delta = grad_refined.to_array();
    residual_grads.w2.add_outer(&g_delta, &cache.residual_hidden);
    add_into(&mut residual_grads.b2, &g_delta);
    let d_hidden = residual.w2.mul_vec_t(&g_delta);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.residual_hidden)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    residual_grads.w1.add_outer(&d_pre, &cache.residual_input);
    add_into(&mut residual_grads.b1, &d_pre);
    let d_input = residual.w1.mul_vec_t(&d_pre);
    let d_fused = &d_input[..d];
    let d_anchor = grad_refined + Vec3::new(d_input[d], d_input[d + 1], d_input[d + 2]);

    // weights: fused path
    let mut d_alpha: Vec<f64> = evidence.features.iter().map(|f| dot(d_fused, f)).collect();
    let mut d_features: Vec<Vec<f64>> = cache
        .alpha
        .iter()
        .map(|&a| d_fused.iter().map(|g| a * g).collect())
        .collect();

    // weights: anchor path. Differentiating A p = b gives
    // ∂L/∂α_r = λᵀ (I − d_r d_rᵀ)(o_r − p) with A λ = ∂L/∂p.
    if !cfg.detach_anchor {
        if cache.fallback {
            for (da, ray) in d_alpha.iter_mut().zip(evidence.rays) {
                *da += d_anchor.dot(ray.origin());
            }
        } else if let Some(lambda) = cache.normal.solve_spd(d_anchor) {
            for ((da, ray), &a) in d_alpha.iter_mut().zip(evidence.rays).zip(&cache.alpha) {
                if a == 0.0 {
                    continue;
                }
                let w = ray.origin() - cache.anchor;
                let dir = ray.direction();
                let proj = w - dir * dir.dot(w);
                *da += lambda.dot(proj);
            }
        }
    }

    // softmax
    let mean: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
    let d_logits: Vec<f64> = cache
        .alpha
        .iter()
        .zip(&d_alpha)
        .map(|(a, g)| a * (g - mean))
        .collect();

    // score head
    let hid = head.b1.len();
    let mut d_pre_total = vec![0.0; hid];
    for r in 0..n {
        let Some(h) = &cache.score_hidden[r] else {
            continue;
        };
        let dz = d_logits[r];
        if dz == 0.0 {
            continue;
        }
        axpy(&mut head_grads.w2, dz, h);
        head_grads.b2 += dz;
        let d_pre: Vec<f64> = (0..hid).map(|k| dz * head.w2[k] * (1.0 - h[k] * h[k])).collect();
        add_into(&mut d_pre_total, &d_pre);
        let cols = head_grads.w1.cols;
        for (k, &g) in d_pre.iter().enumerate() {
            if g != 0.0 {
                axpy(&mut head_grads.w1.data[k * cols + 2 * d..(k + 1) * cols], g, &evidence.features[r]);
                axpy(&mut d_features[r], g, &head.w1.row(k)[2 * d..]);
            }
        }
    }
    let cols = head_grads.w1.cols;
    let mut semantic = vec![0.0; d];
    let mut kinematic = vec![0.0; d];
    for (k, &g) in d_pre_total.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        axpy(&mut head_grads.w1.data[k * cols..k * cols + d], g, &queries.semantic);
        axpy(&mut head_grads.w1.data[k * cols + d..k * cols + 2 * d], g, &queries.kinematic);
        axpy(&mut semantic, g, &head.w1.row(k)[..d]);
        axpy(&mut kinematic, g, &head.w1.row(k)[d..2 * d]);
    }
    add_into(&mut head_grads.b1, &d_pre_total);

    StepGrads {
        semantic,
        kinematic,
        features: d_features,
    }
}

fn split_tokens(tokens: &[ConditionedToken]) -> (Vec<Vec<f64>>, Vec<PluckerRay>) {
    (
        tokens.iter().map(|t| t.feature.clone()).collect(),
        tokens.iter().map(|t| t.ray).collect(),
    )
}

/// Softmax attention of step `step` (1-based) over the tokens.
pub fn score_evidence(
    queries: &QueryPair,
    tokens: &[ConditionedToken],
    step: usize,
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<StepAttention> {
    params.validate()?;
    check_step(step, params)?;
    check_tokens(queries, tokens, params)?;
    let (features, _) = split_tokens(tokens);
    let (logits, _) = score_logits(queries, &features, &params.score_heads[step - 1]);
    let keep = retained(&logits, cfg.top_r);
    Ok(StepAttention {
        step,
        weights: masked_softmax(&logits, &keep),
    })
}

/// `Σ_r α_r f̃_r`
pub fn fuse_evidence(attn: &StepAttention, tokens: &[ConditionedToken]) -> Result<Vec<f64>> {
    if attn.weights.len() != tokens.len() {
        return Err(Error::dim("attention weights", tokens.len(), attn.weights.len()));
    }
    let (features, _) = split_tokens(tokens);
    Ok(weighted_sum(&attn.weights, &features))
}

pub fn decode_step(
    queries: &QueryPair,
    tokens: &[ConditionedToken],
    step: usize,
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<StepOutput> {
    params.validate()?;
    check_step(step, params)?;
    check_tokens(queries, tokens, params)?;
    let (features, rays) = split_tokens(tokens);
    let ev = Evidence {
        features: &features,
        rays: &rays,
    };
    let cache = step_forward(queries, &ev, &params.score_heads[step - 1], &params.residual, cfg);
    Ok(StepOutput {
        anchor: cache.anchor,
        refined: cache.refined,
        attention: StepAttention {
            step,
            weights: cache.alpha,
        },
        fallback: cache.fallback,
    })
}

pub(crate) fn trajectory_from_caches(caches: &[StepCache]) -> TrajectoryPrediction {
    TrajectoryPrediction {
        points: caches.iter().map(|c| c.refined).collect(),
        anchors: caches.iter().map(|c| c.anchor).collect(),
        attention: caches
            .iter()
            .enumerate()
            .map(|(h, c)| StepAttention {
                step: h + 1,
                weights: c.alpha.clone(),
            })
            .collect(),
        degenerate_fallback_used: caches.iter().map(|c| c.fallback).collect(),
    }
}

/// Derives the query pair once and decodes every step over the same tokens.
pub fn decode_trajectory(
    slot: &SlotState,
    tokens: &[ConditionedToken],
    params: &DecoderParams,
    w_sem: &Matrix,
    w_kin: &Matrix,
    cfg: &DecoderConfig,
) -> Result<TrajectoryPrediction> {
    params.validate()?;
    let queries = derive_queries(slot, w_sem, w_kin)?;
    check_tokens(&queries, tokens, params)?;
    let (features, rays) = split_tokens(tokens);
    let ev = Evidence {
        features: &features,
        rays: &rays,
    };
    let caches: Vec<StepCache> = params
        .score_heads
        .iter()
        .map(|head| step_forward(&queries, &ev, head, &params.residual, cfg))
        .collect();
    Ok(trajectory_from_caches(&caches))
}
