use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    fn zero() -> Self {
        Prf::new(0.0, 0.0)
    }
}

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matched n-grams with clipping, candidate total, reference total.
fn clipped_overlap<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let matched = c
        .iter()
        .map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matched,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be at least 1");
    let (matched, c, r) = clipped_overlap(candidate, reference, n);
    if c == 0 || r == 0 {
        return Prf::zero();
    }
    Prf::new(matched as f64 / c as f64, matched as f64 / r as f64)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::zero();
    }
    let l = lcs_len(candidate, reference) as f64;
    Prf::new(l / candidate.len() as f64, l / reference.len() as f64)
}

/// Corpus BLEU-4 with clipped precisions and the brevity penalty. With
/// `smoothing`, a zero precision is replaced by 1 / (2 · candidate n-gram
/// count); a corpus with no candidate n-grams of some order scores 0.
pub fn bleu4<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], smoothing: bool) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let (m, ct, _) = clipped_overlap(c, r, n);
            matched += m;
            total += ct;
        }
        if total == 0 {
            return Ok(0.0);
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if smoothing {
            1.0 / (2.0 * total as f64)
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln() / 4.0;
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

pub fn sentence_bleu4<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], smoothing: bool) -> f64 {
    bleu4(&[candidate.to_vec()], &[reference.to_vec()], smoothing).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub id: String,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

/// ROUGE values are F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub rouge1: MeanStd,
    pub rouge2: MeanStd,
    pub rouge_l: MeanStd,
    /// Mean of smoothed sentence-level BLEU-4.
    pub sentence_bleu4: MeanStd,
    pub corpus_bleu4: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_instance: Vec<InstanceScores>,
}

impl MetricReport {
    /// Score `(id, candidate, reference)` triples.
    pub fn compute<T: Eq + Hash + Clone>(items: &[(String, Vec<T>, Vec<T>)], smoothing: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let per_instance: Vec<InstanceScores> = items
            .iter()
            .map(|(id, c, r)| InstanceScores {
                id: id.clone(),
                rouge1: rouge_n(c, r, 1).f1,
                rouge2: rouge_n(c, r, 2).f1,
                rouge_l: rouge_l(c, r).f1,
                bleu4: sentence_bleu4(c, r, smoothing),
            })
            .collect();
        let col = |f: fn(&InstanceScores) -> f64| MeanStd::of(&per_instance.iter().map(f).collect::<Vec<_>>());
        let cands: Vec<Vec<T>> = items.iter().map(|(_, c, _)| c.clone()).collect();
        let refs: Vec<Vec<T>> = items.iter().map(|(_, _, r)| r.clone()).collect();
        Ok(MetricReport {
            count: items.len(),
            rouge1: col(|s| s.rouge1),
            rouge2: col(|s| s.rouge2),
            rouge_l: col(|s| s.rouge_l),
            sentence_bleu4: col(|s| s.bleu4),
            corpus_bleu4: bleu4(&cands, &refs, smoothing)?,
            per_instance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_examples() {
        let s = rouge_n(&t("the cat"), &t("the cat sat"), 1);
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.8).abs() < 1e-15);
        let l = rouge_l(&t("a b c d"), &t("a c b d"));
        assert_eq!((l.precision, l.recall, l.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(&t(""), &t("a")).f1, 0.0);
    }

    #[test]
    fn bleu_examples() {
        let c = vec![t("the the the the")];
        let r = vec![t("the cat")];
        assert_eq!(bleu4(&c, &r, false).unwrap(), 0.0);
        let c = vec![t("a b c d")];
        let r = vec![t("a b c d e")];
        assert!((bleu4(&c, &r, false).unwrap() - (-0.25f64).exp()).abs() < 1e-15);
        assert!(bleu4::<&str>(&[], &[], true).is_err());
    }
}
