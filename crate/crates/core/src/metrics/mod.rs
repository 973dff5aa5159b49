//! Stemmed set metrics, ranking metrics and slot diagnostics.

mod porter;
mod report;

pub use porter::porter_stem;
pub use report::{evaluate_documents, DocScores, EvalReport, PredictionRecord, PredictionEntry};

use crate::error::{Error, Result};

/// Stems every token of a phrase.
pub fn stem_seq(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| porter_stem(t)).collect()
}

/// Stems and removes later duplicates, keeping the original order.
pub fn stem_dedup(phrases: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for p in phrases {
        let s = stem_seq(p);
        if !s.is_empty() && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(matches: usize, n_pred: usize, n_target: usize) -> Prf {
    if n_pred == 0 || n_target == 0 || matches == 0 {
        return Prf::default();
    }
    let p = matches as f64 / n_pred as f64;
    let r = matches as f64 / n_target as f64;
    Prf {
        precision: p,
        recall: r,
        f1: 2.0 * p * r / (p + r),
    }
}

/// F1 over all predictions under stemmed sequence equality.
pub fn f1_at_m(predictions: &[Vec<String>], targets: &[Vec<String>]) -> Prf {
    let preds = stem_dedup(predictions);
    let tgts = stem_dedup(targets);
    let matches = preds.iter().filter(|p| tgts.contains(p)).count();
    prf(matches, preds.len(), tgts.len())
}

/// F1 over the top `k` ranked predictions, padded with always-wrong
/// sentinels when there are fewer than `k`.
pub fn f1_at_k(ranked: &[Vec<String>], targets: &[Vec<String>], k: usize) -> Prf {
    let preds = stem_dedup(ranked);
    let tgts = stem_dedup(targets);
    let top = &preds[..preds.len().min(k)];
    let matches = top.iter().filter(|p| tgts.contains(p)).count();
    // sentinels never match, so padding only fixes the denominator at k
    prf(matches, k, tgts.len())
}

pub fn f1_at_5(ranked: &[Vec<String>], targets: &[Vec<String>]) -> Prf {
    f1_at_k(ranked, targets, 5)
}

fn relevance(ranked: &[Vec<String>], targets: &[Vec<String>], k: usize) -> Result<(Vec<bool>, usize)> {
    if k == 0 {
        return Err(Error::invalid("cutoff K must be positive"));
    }
    let preds = stem_dedup(ranked);
    let tgts = stem_dedup(targets);
    let rel = preds.iter().take(k).map(|p| tgts.contains(p)).collect();
    Ok((rel, tgts.len()))
}

/// Average precision over the first `k` ranks, normalized by
/// `min(|targets|, k)`.
pub fn map_at_k(ranked: &[Vec<String>], targets: &[Vec<String>], k: usize) -> Result<f64> {
    let (rel, n_t) = relevance(ranked, targets, k)?;
    let denom = n_t.min(k);
    if denom == 0 {
        return Ok(0.0);
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / denom as f64)
}

/// Binary-gain NDCG over the first `k` ranks; the ideal ranking places
/// `min(|targets|, k)` relevant items first.
pub fn ndcg_at_k(ranked: &[Vec<String>], targets: &[Vec<String>], k: usize) -> Result<f64> {
    let (rel, n_t) = relevance(ranked, targets, k)?;
    let ideal: f64 = (0..n_t.min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    if ideal == 0.0 {
        return Ok(0.0);
    }
    let dcg: f64 = rel
        .iter()
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

/// `1 - distinct / non-null` over raw slot outputs (`None` is a null slot).
pub fn duplication_ratio(raw: &[Option<Vec<String>>]) -> f64 {
    let non_null: Vec<Vec<String>> = raw.iter().flatten().filter(|p| !p.is_empty()).cloned().collect();
    if non_null.is_empty() {
        return 0.0;
    }
    1.0 - stem_dedup(&non_null).len() as f64 / non_null.len() as f64
}

/// Fraction of slots that emitted the null token.
pub fn null_ratio(raw: &[Option<Vec<String>>]) -> f64 {
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter().filter(|p| p.is_none()).count() as f64 / raw.len() as f64
}

/// Whether the stemmed phrase occurs as a contiguous run of the stemmed
/// source tokens.
pub fn is_present(phrase: &[String], source_stems: &[String]) -> bool {
    let p = stem_seq(phrase);
    crate::corpus::find_run(source_stems, &p).is_some()
}
