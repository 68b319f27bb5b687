//! BLEU variants and the roll-out sequence cost.
//!
//! Sentence-level scores use add-one smoothing on the 2..4-gram precisions
//! (numerator and denominator), leaving unigram precision exact. Corpus BLEU is
//! the usual unsmoothed BLEU-4 over pooled counts.

use std::collections::HashMap;

use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BleuScore(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SequenceCost(pub f64);

/// Truncates at the first `EOS` and drops `BOS`/`PAD`.
pub fn strip_special(seq: &[TokenId]) -> Vec<TokenId> {
    seq.iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != BOS && t != PAD)
        .copied()
        .collect()
}

/// The part of a generated sequence before its first `EOS`.
///
/// Unlike [`strip_special`] this keeps `PAD`/`BOS`, so a forced special token
/// still counts as a wrong token when the hypothesis is scored.
pub fn truncate_at_eos(seq: &[TokenId]) -> &[TokenId] {
    let end = seq.iter().position(|&t| t == EOS).unwrap_or(seq.len());
    &seq[..end]
}

pub fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    assert!((1..=MAX_ORDER).contains(&n), "n-gram order {n} outside 1..=4");
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, candidate n-gram count) for one order.
fn clipped_matches(candidate: &[TokenId], reference: &[TokenId], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp()
}

fn geometric_mean(precisions: &[f64]) -> f64 {
    if precisions.contains(&0.0) {
        return 0.0;
    }
    let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
    mean_log.exp()
}

/// Smoothed sentence BLEU of already-stripped sequences.
pub fn smoothed_sentence_bleu(candidate: &[TokenId], reference: &[TokenId]) -> BleuScore {
    if candidate.is_empty() {
        return BleuScore(0.0);
    }
    let mut precisions = [0.0; MAX_ORDER];
    for (i, p) in precisions.iter_mut().enumerate() {
        let n = i + 1;
        let (m, c) = clipped_matches(candidate, reference, n);
        *p = if n == 1 {
            m as f64 / c as f64
        } else {
            (m as f64 + 1.0) / (c as f64 + 1.0)
        };
    }
    let value = geometric_mean(&precisions) * brevity_penalty(candidate.len(), reference.len());
    BleuScore(value.clamp(0.0, 1.0))
}

/// `1 − smoothed BLEU`; zero exactly when the sequences are identical.
pub fn sequence_cost(candidate: &[TokenId], reference: &[TokenId]) -> SequenceCost {
    SequenceCost(1.0 - smoothed_sentence_bleu(candidate, reference).0)
}

/// Unsmoothed corpus BLEU-4 over stripped sequences.
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[R]) -> Result<BleuScore>
where
    C: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "corpus_bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_matches(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if cand_len == 0 {
        return Ok(BleuScore(0.0));
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let value = geometric_mean(&precisions) * brevity_penalty(cand_len, ref_len);
    Ok(BleuScore(value.clamp(0.0, 1.0)))
}
