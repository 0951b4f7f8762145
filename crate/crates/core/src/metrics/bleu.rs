//! Corpus-level BLEU-4.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Numerator used for an order with zero clipped matches when smoothing.
pub const EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuSmoothing {
    /// Any order with zero matches makes the score zero.
    #[default]
    None,
    /// Replace a zero match count by `EPSILON`.
    Epsilon,
}

/// Clipped n-gram statistics accumulated over a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hypothesis_length: u64,
    /// Sum over sentences of the reference length closest to the hypothesis.
    pub reference_length: u64,
}

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl NGramStats {
    /// Adds one hypothesis against its references.
    pub fn add(&mut self, hypothesis: &[String], references: &[Vec<String>]) {
        let hyp_len = hypothesis.len();
        self.hypothesis_length += hyp_len as u64;
        // closest reference length, ties broken toward the shorter one
        let closest = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(hyp_len), r))
            .unwrap_or(0);
        self.reference_length += closest as u64;
        for n in 1..=MAX_ORDER {
            let hyp = ngram_counts(hypothesis, n);
            let mut max_ref: BTreeMap<&[String], u64> = BTreeMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hyp {
                self.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                self.totals[n - 1] += c;
            }
        }
    }

    pub fn precisions(&self, smoothing: BleuSmoothing) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            let m = match (self.matches[n], smoothing) {
                (0, BleuSmoothing::Epsilon) => EPSILON,
                (m, _) => m as f64,
            };
            p[n] = m / self.totals[n] as f64;
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.hypothesis_length as f64, self.reference_length as f64);
        if c == 0.0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    pub fn score(&self, smoothing: BleuSmoothing) -> f64 {
        let p = self.precisions(smoothing);
        if p.iter().any(|&x| x <= 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

/// BLEU-4 with uniform weights over `hypotheses[i]` vs `references[i]`.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>], smoothing: BleuSmoothing) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Protocol("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Protocol(alloc::format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = NGramStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h, r);
    }
    Ok(stats.score(smoothing))
}
