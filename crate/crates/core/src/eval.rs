//! Corpus BLEU and ROUGE-L.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest common subsequence length by dynamic programming.
pub fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Modified precision per order, after smoothing.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn check_corpora<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::arg("empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::arg(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over orders `1..=max_order`. Orders with
/// no clipped match use `(m + 1) / (c + 1)` in place of `m / c`. The brevity
/// penalty is `exp(1 − r/c)` for `c ≤ r`, and 0 when the corpus is empty.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_order: usize) -> Result<BleuScore> {
    check_corpora(hyps, refs)?;
    if max_order == 0 {
        return Err(Error::arg("BLEU order must be at least 1"));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_order {
            let ref_counts = ngram_counts(rf, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            if m == 0 {
                1.0 / (t as f64 + 1.0)
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_order as f64;
    let score = if bp == 0.0 { 0.0 } else { bp * log_mean.exp() };
    Ok(BleuScore {
        score: score.clamp(0.0, 1.0),
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// LCS F-measure `(1 + β²) P R / (R + β² P)` of one pair; 0 for an empty
/// hypothesis or no overlap.
pub fn rouge_l_pair<T: Eq>(hyp: &[T], reference: &[T], beta2: f64) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    (1.0 + beta2) * p * r / (r + beta2 * p)
}

pub const ROUGE_BETA2: f64 = 1.2;

/// Mean per-pair ROUGE-L F-measure.
pub fn rouge_l<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>], beta2: f64) -> Result<f64> {
    check_corpora(hyps, refs)?;
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_pair(h, r, beta2)).sum();
    Ok(total / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub n_instances: usize,
    pub brevity_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn compute<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<Self> {
        let b: Vec<BleuScore> = (1..=4).map(|k| bleu(hyps, refs, k)).collect::<Result<_>>()?;
        Ok(Self {
            bleu1: b[0].score,
            bleu2: b[1].score,
            bleu3: b[2].score,
            bleu4: b[3].score,
            rouge_l: rouge_l(hyps, refs, ROUGE_BETA2)?,
            n_instances: hyps.len(),
            brevity_penalty: b[0].brevity_penalty,
            config_hash: None,
            seed: None,
        })
    }

    /// Scores whitespace-tokenized strings.
    pub fn from_text(hyps: &[String], refs: &[String]) -> Result<Self> {
        let split = |v: &[String]| -> Vec<Vec<String>> {
            v.iter()
                .map(|s| s.split_whitespace().map(String::from).collect())
                .collect()
        };
        Self::compute(&split(hyps), &split(refs))
    }

    pub fn scores(&self) -> [f64; 5] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l]
    }
}
