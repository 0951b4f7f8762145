//! Batch forward pass, loss assembly and the matching backward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::{smoothness_loss, smoothness_loss_grad, trajectory_loss, trajectory_loss_grad, LossBreakdown, LossOptions};
use crate::decoder::step_backward;
use crate::encoding::accumulate_gradients;
use crate::linalg::{add_into, Vec3};
use crate::model::{condition_clip, rollout, turn_forward, ConditionedClip, DialogueSample, Model, TurnCache, TurnContext};
use crate::state::{identity_loss_gradients, identity_loss_terms, slot_backward};
use crate::{Error, Result};

/// Values held constant when re-evaluating the loss at perturbed parameters.
pub(crate) struct Frozen {
    pub contexts: Vec<Vec<TurnContext>>,
    /// Per dialogue, per turn, the anchors of each step (detached mode only).
    pub anchors: Option<Vec<Vec<Vec<Vec3>>>>,
}

pub(crate) struct BatchForward {
    pub clips: Vec<ConditionedClip>,
    pub turns: Vec<Vec<(TurnContext, TurnCache)>>,
    pub breakdown: LossBreakdown,
    /// `(dialogue, turn)` of each geometric turn, in batch order.
    geometric: Vec<(usize, usize)>,
    same_pairs: Vec<(usize, usize)>,
    diff_pairs: Vec<(usize, usize)>,
}

impl BatchForward {
    pub fn freeze(&self, detach_anchor: bool) -> Frozen {
        Frozen {
            contexts: self
                .turns
                .iter()
                .map(|t| t.iter().map(|(ctx, _)| ctx.clone()).collect())
                .collect(),
            anchors: detach_anchor.then(|| {
                self.turns
                    .iter()
                    .map(|t| t.iter().map(|(_, c)| c.steps.iter().map(|s| s.anchor).collect()).collect())
                    .collect()
            }),
        }
    }
}

fn check_batch(model: &Model, batch: &[DialogueSample]) -> Result<()> {
    model.validate()?;
    let d = model.token_dim();
    let horizon = model.decoder.horizon();
    for (i, sample) in batch.iter().enumerate() {
        if let Some(t) = sample.tokens.iter().find(|t| t.feature.len() != d) {
            return Err(Error::dim("token feature", d, t.feature.len()));
        }
        for turn in &sample.turns {
            if turn.query.vector.len() != d {
                return Err(Error::dim("query embedding", d, turn.query.vector.len()));
            }
            if let Some(t) = &turn.target {
                if t.points.len() != horizon || t.valid.len() != horizon {
                    return Err(Error::Data(alloc::format!(
                        "dialogue {i}: target {} must have {horizon} points and mask entries",
                        t.target_id
                    )));
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn forward_batch(
    model: &Model,
    batch: &[DialogueSample],
    opts: &LossOptions,
    frozen: Option<&Frozen>,
) -> Result<BatchForward> {
    check_batch(model, batch)?;
    opts.weights.validate()?;
    let mut clips = Vec::with_capacity(batch.len());
    let mut turns = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let clip = condition_clip(model, &sample.tokens)?;
        let run = match frozen {
            None => rollout(model, &clip, sample, opts.history_for(i), &opts.decoder),
            Some(f) => sample
                .turns
                .iter()
                .enumerate()
                .map(|(k, turn)| {
                    let ctx = f.contexts[i][k].clone();
                    let anchors = f.anchors.as_ref().map(|a| &a[i][k][..]);
                    let cache = turn_forward(model, &clip, &ctx, &turn.query, turn.target.is_some(), &opts.decoder, anchors);
                    (ctx, cache)
                })
                .collect(),
        };
        clips.push(clip);
        turns.push(run);
    }

    let mut geometric = Vec::new();
    let mut same_pairs = Vec::new();
    let mut diff_pairs = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for (i, sample) in batch.iter().enumerate() {
        let first = geometric.len();
        for (k, turn) in sample.turns.iter().enumerate() {
            let Some(target) = &turn.target else { continue };
            let points: Vec<Vec3> = turns[i][k].1.steps.iter().map(|s| s.refined).collect();
            breakdown.trajectory += trajectory_loss(&points, &target.points, &target.valid);
            breakdown.smoothness += smoothness_loss(&points);
            if target.valid_count() == 0 {
                breakdown.empty_targets += 1;
            }
            let idx = geometric.len();
            for (j, &(_, kj)) in geometric.iter().enumerate().skip(first) {
                let kj: usize = kj;
                let other = sample.turns[kj].target.as_ref().map(|t| &t.target_id);
                if other == Some(&target.target_id) {
                    same_pairs.push((j, idx));
                } else {
                    diff_pairs.push((j, idx));
                }
            }
            geometric.push((i, k));
        }
    }
    let g = geometric.len();
    breakdown.geometric_turns = g;
    if g > 0 {
        breakdown.trajectory /= g as f64;
        breakdown.smoothness /= g as f64;
    }
    let slots: Vec<&[f64]> = geometric.iter().map(|&(i, k)| &turns[i][k].1.slot[..]).collect();
    let pair = |p: &(usize, usize)| (slots[p.0], slots[p.1]);
    let same: Vec<_> = same_pairs.iter().map(pair).collect();
    let diff: Vec<_> = diff_pairs.iter().map(pair).collect();
    breakdown.identity = identity_loss_terms(&same, &diff, opts.identity_margin);
    let w = &opts.weights;
    breakdown.total =
        w.trajectory * breakdown.trajectory + w.smoothness * breakdown.smoothness + w.identity * breakdown.identity;
    Ok(BatchForward {
        clips,
        turns,
        breakdown,
        geometric,
        same_pairs,
        diff_pairs,
    })
}

pub(crate) fn backward(model: &Model, batch: &[DialogueSample], opts: &LossOptions, fwd: &BatchForward) -> Model {
    let mut grads = model.zeros_like();
    let g = fwd.geometric.len();
    if g == 0 {
        return grads;
    }
    let w = &opts.weights;
    let slots: Vec<&[f64]> = fwd.geometric.iter().map(|&(i, k)| &fwd.turns[i][k].1.slot[..]).collect();
    let id_grads = identity_loss_gradients(&slots, &fwd.same_pairs, &fwd.diff_pairs, opts.identity_margin, w.identity);
    let d = model.token_dim();
    let scale = 1.0 / g as f64;

    let mut feature_grads: Vec<Vec<Vec<f64>>> = fwd.clips.iter().map(|c| vec![vec![0.0; d]; c.features.len()]).collect();
    for (n, &(i, k)) in fwd.geometric.iter().enumerate() {
        let target = batch[i].turns[k].target.as_ref().expect("geometric turn has a target");
        let cache = &fwd.turns[i][k].1;
        let points: Vec<Vec3> = cache.steps.iter().map(|s| s.refined).collect();
        let g_traj = trajectory_loss_grad(&points, &target.points, &target.valid);
        let g_smooth = smoothness_loss_grad(&points);
        let ev = fwd.clips[i].evidence();
        let mut d_sem = vec![0.0; d];
        let mut d_kin = vec![0.0; d];
        for (h, step) in cache.steps.iter().enumerate() {
            let g_point = (g_traj[h] * w.trajectory + g_smooth[h] * w.smoothness) * scale;
            let head = &model.decoder.score_heads[h];
            let residual = &model.decoder.residual;
            let (head_grads, residual_grads) = {
                let crate::decoder::DecoderParams { score_heads, residual } = &mut grads.decoder;
                (&mut score_heads[h], residual)
            };
            let sg = step_backward(
                g_point,
                &cache.queries,
                &ev,
                step,
                head,
                residual,
                &opts.decoder,
                head_grads,
                residual_grads,
            );
            add_into(&mut d_sem, &sg.semantic);
            add_into(&mut d_kin, &sg.kinematic);
            for (acc, gf) in feature_grads[i].iter_mut().zip(&sg.features) {
                add_into(acc, gf);
            }
        }
        grads.w_sem.add_outer(&d_sem, &cache.slot);
        grads.w_kin.add_outer(&d_kin, &cache.slot);
        let mut d_slot = model.w_sem.mul_vec_t(&d_sem);
        add_into(&mut d_slot, &model.w_kin.mul_vec_t(&d_kin));
        add_into(&mut d_slot, &id_grads[n]);
        // the returned gradient with respect to the previous slot is dropped
        let _ = slot_backward(&d_slot, &cache.slot_cache, &model.slot, &mut grads.slot);
    }
    for (i, sample) in batch.iter().enumerate() {
        for (t, gf) in sample.tokens.iter().zip(&feature_grads[i]) {
            if gf.iter().any(|v| *v != 0.0) {
                accumulate_gradients(gf, &t.ray, t.timestamp, &model.rtge, &model.fourier, &mut grads.rtge);
            }
        }
    }
    grads
}

/// Weighted total loss over a batch of dialogues, with its breakdown.
pub fn total_loss(model: &Model, batch: &[DialogueSample], opts: &LossOptions) -> Result<LossBreakdown> {
    Ok(forward_batch(model, batch, opts, None)?.breakdown)
}

/// Loss and its gradient with respect to every parameter, shaped like the
/// model.
pub fn loss_and_gradients(model: &Model, batch: &[DialogueSample], opts: &LossOptions) -> Result<(LossBreakdown, Model)> {
    let fwd = forward_batch(model, batch, opts, None)?;
    let grads = backward(model, batch, opts, &fwd);
    Ok((fwd.breakdown, grads))
}
