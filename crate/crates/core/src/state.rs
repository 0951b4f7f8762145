//! The persistent target slot carried across dialogue turns.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::{add_into, dot, norm, Matrix};
use crate::metrics::text::tokenize;
use crate::{Error, Result};

/// Default margin of the different-target hinge.
pub const DEFAULT_IDENTITY_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub vector: Vec<f64>,
    pub turn_index: usize,
}

impl SlotState {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Gated recurrence
/// `s = g ⊙ tanh(W_c x + b_c) + (1 − g) ⊙ s_prev`, `g = σ(W_g x + b_g)`,
/// with `x = [s_prev; evidence; query]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotUpdateParams {
    /// `d × 3d`
    pub candidate: Matrix,
    pub candidate_bias: Vec<f64>,
    /// `d × 3d`
    pub gate: Matrix,
    pub gate_bias: Vec<f64>,
}

impl SlotUpdateParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            candidate: Matrix::zeros(dim, 3 * dim),
            candidate_bias: vec![0.0; dim],
            gate: Matrix::zeros(dim, 3 * dim),
            gate_bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.candidate_bias.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (what, m) in [("slot candidate weights", &self.candidate), ("slot gate weights", &self.gate)] {
            if m.rows != d {
                return Err(Error::dim(what, d, m.rows));
            }
            if m.cols != 3 * d {
                return Err(Error::dim(what, 3 * d, m.cols));
            }
        }
        if self.gate_bias.len() != d {
            return Err(Error::dim("slot gate bias", d, self.gate_bias.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPair {
    pub semantic: Vec<f64>,
    pub kinematic: Vec<f64>,
}

/// Fixed-size summary of a turn's question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
}

impl QueryEmbedding {
    /// Signed hashed bag of words (FNV-1a), L2-normalized. Empty questions
    /// map to the zero vector.
    pub fn from_text(text: &str, dim: usize) -> Self {
        let mut vector = vec![0.0; dim];
        if dim > 0 {
            for word in tokenize(text) {
                let h = fnv1a(word.as_bytes());
                let bucket = (h % dim as u64) as usize;
                let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
                vector[bucket] += sign;
            }
            let n = norm(&vector);
            if n > 0.0 {
                vector.iter_mut().for_each(|v| *v /= n);
            }
        }
        Self { vector }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn init_slot(dim: usize) -> SlotState {
    assert!(dim > 0, "slot dimension must be positive");
    SlotState {
        vector: vec![0.0; dim],
        turn_index: 0,
    }
}

/// Intermediate values of one slot update, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct SlotCache {
    pub input: Vec<f64>,
    pub candidate: Vec<f64>,
    pub gate: Vec<f64>,
    pub prev: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn slot_forward(
    prev: &[f64],
    evidence: &[f64],
    query: &[f64],
    params: &SlotUpdateParams,
) -> (Vec<f64>, SlotCache) {
    let mut input = Vec::with_capacity(3 * prev.len());
    input.extend_from_slice(prev);
    input.extend_from_slice(evidence);
    input.extend_from_slice(query);

    let mut candidate = params.candidate.mul_vec(&input);
    add_into(&mut candidate, &params.candidate_bias);
    candidate.iter_mut().for_each(|v| *v = v.tanh());
    let mut gate = params.gate.mul_vec(&input);
    add_into(&mut gate, &params.gate_bias);
    gate.iter_mut().for_each(|v| *v = sigmoid(*v));

    let next = (0..prev.len())
        .map(|i| gate[i] * candidate[i] + (1.0 - gate[i]) * prev[i])
        .collect();
    (
        next,
        SlotCache {
            input,
            candidate,
            gate,
            prev: prev.to_vec(),
        },
    )
}

/// Accumulates parameter gradients from `∂L/∂s` and returns `∂L/∂s_prev`.
/// Training discards the returned value (cross-turn stop-gradient).
pub(crate) fn slot_backward(
    grad_slot: &[f64],
    cache: &SlotCache,
    params: &SlotUpdateParams,
    grads: &mut SlotUpdateParams,
) -> Vec<f64> {
    let d = grad_slot.len();
    let mut d_pre_c = vec![0.0; d];
    let mut d_pre_g = vec![0.0; d];
    let mut d_prev = vec![0.0; d];
    for i in 0..d {
        let g = cache.gate[i];
        let c = cache.candidate[i];
        d_pre_c[i] = grad_slot[i] * g * (1.0 - c * c);
        d_pre_g[i] = grad_slot[i] * (c - cache.prev[i]) * g * (1.0 - g);
        d_prev[i] = grad_slot[i] * (1.0 - g);
    }
    grads.candidate.add_outer(&d_pre_c, &cache.input);
    add_into(&mut grads.candidate_bias, &d_pre_c);
    grads.gate.add_outer(&d_pre_g, &cache.input);
    add_into(&mut grads.gate_bias, &d_pre_g);

    let mut d_input = params.candidate.mul_vec_t(&d_pre_c);
    add_into(&mut d_input, &params.gate.mul_vec_t(&d_pre_g));
    add_into(&mut d_prev, &d_input[..d]);
    d_prev
}

pub fn update_slot(
    prev: &SlotState,
    evidence_pool: &[f64],
    query: &QueryEmbedding,
    params: &SlotUpdateParams,
) -> Result<SlotState> {
    params.validate()?;
    let d = params.dim();
    if prev.dim() != d {
        return Err(Error::dim("previous slot", d, prev.dim()));
    }
    if evidence_pool.len() != d {
        return Err(Error::dim("evidence pool", d, evidence_pool.len()));
    }
    if query.vector.len() != d {
        return Err(Error::dim("query embedding", d, query.vector.len()));
    }
    let (vector, _) = slot_forward(&prev.vector, evidence_pool, &query.vector, params);
    Ok(SlotState {
        vector,
        turn_index: prev.turn_index + 1,
    })
}

/// `q_sem = W_sem s`, `q_kin = W_kin s`.
pub fn derive_queries(slot: &SlotState, w_sem: &Matrix, w_kin: &Matrix) -> Result<QueryPair> {
    let d = slot.dim();
    for (what, m) in [("semantic query weights", w_sem), ("kinematic query weights", w_kin)] {
        if m.cols != d {
            return Err(Error::dim(what, d, m.cols));
        }
        if m.rows != d {
            return Err(Error::dim(what, d, m.rows));
        }
    }
    Ok(QueryPair {
        semantic: w_sem.mul_vec(&slot.vector),
        kinematic: w_kin.mul_vec(&slot.vector),
    })
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `∂cos(a, b)/∂a`
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na))
        .collect()
}

/// Mean of `1 − cos` over same-target pairs plus mean of
/// `max(0, cos − (1 − margin))` over different-target pairs. Empty groups
/// contribute zero.
pub fn identity_consistency_loss(
    slots_same: &[(SlotState, SlotState)],
    slots_diff: &[(SlotState, SlotState)],
    margin: f64,
) -> f64 {
    let same: Vec<_> = slots_same.iter().map(|(a, b)| (&a.vector[..], &b.vector[..])).collect();
    let diff: Vec<_> = slots_diff.iter().map(|(a, b)| (&a.vector[..], &b.vector[..])).collect();
    identity_loss_terms(&same, &diff, margin)
}

pub(crate) fn identity_loss_terms(same: &[(&[f64], &[f64])], diff: &[(&[f64], &[f64])], margin: f64) -> f64 {
    let mut loss = 0.0;
    if !same.is_empty() {
        loss += same.iter().map(|(a, b)| 1.0 - cosine(a, b)).sum::<f64>() / same.len() as f64;
    }
    if !diff.is_empty() {
        loss += diff
            .iter()
            .map(|(a, b)| (cosine(a, b) - (1.0 - margin)).max(0.0))
            .sum::<f64>()
            / diff.len() as f64;
    }
    loss
}

/// Gradient of the identity loss with respect to each slot, where pairs are
/// given as indices into `slots`.
pub(crate) fn identity_loss_gradients(
    slots: &[&[f64]],
    same: &[(usize, usize)],
    diff: &[(usize, usize)],
    margin: f64,
    scale: f64,
) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = slots.iter().map(|s| vec![0.0; s.len()]).collect();
    if !same.is_empty() {
        let w = -scale / same.len() as f64;
        for &(i, j) in same {
            let (a, b) = (slots[i], slots[j]);
            crate::linalg::axpy(&mut grads[i], w, &cosine_grad(a, b));
            crate::linalg::axpy(&mut grads[j], w, &cosine_grad(b, a));
        }
    }
    if !diff.is_empty() {
        let w = scale / diff.len() as f64;
        for &(i, j) in diff {
            let (a, b) = (slots[i], slots[j]);
            if cosine(a, b) - (1.0 - margin) > 0.0 {
                crate::linalg::axpy(&mut grads[i], w, &cosine_grad(a, b));
                crate::linalg::axpy(&mut grads[j], w, &cosine_grad(b, a));
            }
        }
    }
    grads
}
