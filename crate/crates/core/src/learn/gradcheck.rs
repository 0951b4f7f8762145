//! Central finite differences against the analytic gradient, block by
//! block.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::backward::{backward, forward_batch};
use super::LossOptions;
use crate::model::{DialogueSample, Model};
use crate::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub step: f64,
    pub loss: LossOptions,
    /// Test hook: scale the analytic gradient of the named block before
    /// comparing.
    #[serde(default)]
    pub corrupt_block: Option<(String, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            loss: LossOptions::default(),
            corrupt_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub len: usize,
    /// `max |fd − analytic| / max(1, |analytic|)`
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub detach_anchor: bool,
    pub blocks: Vec<BlockCheck>,
    pub pass: bool,
    /// Blocks whose analytic gradient is identically zero.
    pub zero_gradient_blocks: Vec<String>,
    /// Set when a perturbed loss was not finite.
    pub non_finite_block: Option<String>,
}

impl GradCheckReport {
    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.pass).map(|b| b.name.as_str()).collect()
    }
}

/// Compares every parameter's analytic derivative with a central
/// difference. Contexts carried between turns (and, when detached, the
/// anchors) are frozen at their unperturbed values, matching the
/// stop-gradients of the analytic pass.
pub fn grad_check(model: &Model, batch: &[DialogueSample], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let opts = &cfg.loss;
    let fwd = forward_batch(model, batch, opts, None)?;
    let mut analytic = backward(model, batch, opts, &fwd);
    if let Some((name, factor)) = &cfg.corrupt_block {
        for (n, values) in analytic.blocks_mut() {
            if &n == name {
                values.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    let frozen = fwd.freeze(opts.decoder.detach_anchor);
    let base = model.to_flat();
    let mut probe = model.clone();
    let mut flat = base.clone();
    let mut offset = 0;
    let mut blocks = Vec::new();
    let mut zero_gradient_blocks = Vec::new();
    let mut non_finite_block = None;
    for (name, grad) in analytic.blocks() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut finite = true;
        for (j, &an) in grad.iter().enumerate() {
            let idx = offset + j;
            let mut eval = |x: f64| -> Result<f64> {
                flat[idx] = x;
                probe.assign_flat(&flat)?;
                Ok(forward_batch(&probe, batch, opts, Some(&frozen))?.breakdown.total)
            };
            let plus = eval(base[idx] + cfg.step)?;
            let minus = eval(base[idx] - cfg.step)?;
            flat[idx] = base[idx];
            if !(plus.is_finite() && minus.is_finite()) {
                finite = false;
                continue;
            }
            let fd = (plus - minus) / (2.0 * cfg.step);
            max_rel = max_rel.max((fd - an).abs() / an.abs().max(1.0));
            max_abs = max_abs.max(an.abs());
        }
        if !finite && non_finite_block.is_none() {
            non_finite_block = Some(name.clone());
        }
        if grad.iter().all(|v| *v == 0.0) {
            zero_gradient_blocks.push(name.clone());
        }
        offset += grad.len();
        blocks.push(BlockCheck {
            pass: finite && max_rel < cfg.tolerance,
            name,
            len: grad.len(),
            max_relative_error: max_rel,
            max_abs_gradient: max_abs,
        });
    }
    let pass = blocks.iter().all(|b| b.pass) && fwd.breakdown.total.is_finite();
    Ok(GradCheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        detach_anchor: opts.decoder.detach_anchor,
        blocks,
        pass,
        zero_gradient_blocks,
        non_finite_block,
    })
}
