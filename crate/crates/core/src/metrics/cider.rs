//! CIDEr-D: tf-idf n-gram vectors, clipped cosine similarity and a Gaussian
//! length penalty, averaged over n = 1..4 and over references, times 10.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;


#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use super::bleu::{ngram_counts, MAX_ORDER};
use crate::{Error, Result};

pub const SIGMA: f64 = 6.0;
pub const SCALE: f64 = 10.0;

struct Weighted<'a> {
    vecs: Vec<BTreeMap<&'a [String], f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn weigh<'a>(tokens: &'a [String], df: &BTreeMap<&[String], u64>, log_n: f64) -> Weighted<'a> {
    let mut vecs = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for n in 1..=MAX_ORDER {
        let mut v = BTreeMap::new();
        let mut norm = 0.0;
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - d.ln());
            norm += w * w;
            v.insert(g, w);
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    Weighted {
        vecs,
        norms,
        length: tokens.len(),
    }
}

fn similarity(hyp: &Weighted<'_>, reference: &Weighted<'_>) -> f64 {
    let delta = hyp.length as f64 - reference.length as f64;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_ORDER {
        let mut val = 0.0;
        for (g, vh) in &hyp.vecs[n] {
            if let Some(vr) = reference.vecs[n].get(g) {
                val += vh.min(*vr) * vr;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_ORDER as f64
}

/// Per-sentence CIDEr-D scores. Document frequencies count, for every
/// n-gram, the reference sets containing it.
pub fn cider_scores(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::Protocol("CIDEr over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Protocol(alloc::format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut df: BTreeMap<&[String], u64> = BTreeMap::new();
    for refs in references {
        let mut seen = BTreeSet::new();
        for r in refs {
            for n in 1..=MAX_ORDER {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (references.len() as f64).ln();
    let mut scores = vec![0.0; hypotheses.len()];
    for ((h, refs), s) in hypotheses.iter().zip(references).zip(&mut scores) {
        if refs.is_empty() {
            continue;
        }
        let hv = weigh(h, &df, log_n);
        let sum: f64 = refs.iter().map(|r| similarity(&hv, &weigh(r, &df, log_n))).sum();
        *s = SCALE * sum / refs.len() as f64;
    }
    Ok(scores)
}

/// Corpus CIDEr-D: the mean of the per-sentence scores.
pub fn cider(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    let s = cider_scores(hypotheses, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::text::tokenize;

    #[test]
    fn disjoint_hypothesis_scores_zero() {
        let h = vec![tokenize("x y z w"), tokenize("a b c d")];
        let r = vec![vec![tokenize("a b c d")], vec![tokenize("e f g h")]];
        assert_eq!(cider_scores(&h, &r).unwrap()[0], 0.0);
    }

    #[test]
    fn single_document_corpus_has_zero_idf() {
        let s = tokenize("one two three four");
        assert_eq!(cider(&[s.clone()], &[vec![s]]).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(cider(&[], &[]).is_err());
    }
}
