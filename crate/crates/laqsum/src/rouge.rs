//! Self-contained ROUGE-1/2/L/SU4 F1 plus latent-query diagnostics.
//!
//! House tokenization: lowercase, whitespace split, surrounding
//! punctuation stripped, no stemming or stopword removal. Scores are
//! internally consistent; no attempt is made at parity with the
//! reference perl toolkit.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcs::lcs_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
    RSU4,
}

impl RougeVariant {
    pub fn name(self) -> &'static str {
        match self {
            RougeVariant::R1 => "R1",
            RougeVariant::R2 => "R2",
            RougeVariant::RL => "RL",
            RougeVariant::RSU4 => "RSU4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R1" | "ROUGE-1" => Some(RougeVariant::R1),
            "R2" | "ROUGE-2" => Some(RougeVariant::R2),
            "RL" | "ROUGE-L" => Some(RougeVariant::RL),
            "RSU4" | "ROUGE-SU4" | "SU4" => Some(RougeVariant::RSU4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub variant: RougeVariant,
}

impl RougeScore {
    fn from_pr(precision: f64, recall: f64, variant: RougeVariant) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            variant,
        }
    }

    fn zero(variant: RougeVariant) -> Self {
        Self {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            variant,
        }
    }
}

/// House tokenization for metric computation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap F1.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Result<RougeScore> {
    if n < 1 {
        return Err(Error::Config("rouge_n requires n >= 1".into()));
    }
    let variant = if n == 1 { RougeVariant::R1 } else { RougeVariant::R2 };
    if candidate.len() < n || reference.len() < n {
        return Ok(RougeScore::zero(variant));
    }
    let cand = ngram_counts(candidate, n);
    let rf = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(rf.get(g).copied().unwrap_or(0)))
        .sum();
    let n_cand = candidate.len() - n + 1;
    let n_ref = reference.len() - n + 1;
    Ok(RougeScore::from_pr(
        overlap as f64 / n_cand as f64,
        overlap as f64 / n_ref as f64,
        variant,
    ))
}

/// LCS-based F-measure, sharing the DP with the weak labeler.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::zero(RougeVariant::RL);
    }
    let lcs = lcs_indices(candidate, reference).len();
    RougeScore::from_pr(
        lcs as f64 / candidate.len() as f64,
        lcs as f64 / reference.len() as f64,
        RougeVariant::RL,
    )
}

fn counting_units<'a>(words: &'a [String], max_skip: usize) -> HashMap<(&'a str, Option<&'a str>), usize> {
    let mut units = HashMap::new();
    for (i, w) in words.iter().enumerate() {
        *units.entry((w.as_str(), None)).or_insert(0) += 1;
        // pairs with at most max_skip intervening words
        for j in (i + 1)..words.len().min(i + 2 + max_skip) {
            *units.entry((w.as_str(), Some(words[j].as_str()))).or_insert(0) += 1;
        }
    }
    units
}

/// Skip-bigram (max gap 4) plus unigram F1.
pub fn rouge_su4(candidate: &[String], reference: &[String]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::zero(RougeVariant::RSU4);
    }
    let cu = counting_units(candidate, 4);
    let ru = counting_units(reference, 4);
    let overlap: usize = cu
        .iter()
        .map(|(u, &c)| c.min(ru.get(u).copied().unwrap_or(0)))
        .sum();
    let n_cand: usize = cu.values().sum();
    let n_ref: usize = ru.values().sum();
    RougeScore::from_pr(
        overlap as f64 / n_cand as f64,
        overlap as f64 / n_ref as f64,
        RougeVariant::RSU4,
    )
}

pub fn score(candidate: &str, reference: &str, variant: RougeVariant) -> Result<RougeScore> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    match variant {
        RougeVariant::R1 => rouge_n(&c, &r, 1),
        RougeVariant::R2 => rouge_n(&c, &r, 2),
        RougeVariant::RL => Ok(rouge_l(&c, &r)),
        RougeVariant::RSU4 => Ok(rouge_su4(&c, &r)),
    }
}

/// Max over references (single reference is the common path).
pub fn score_multi(candidate: &str, references: &[String], variant: RougeVariant) -> Result<RougeScore> {
    let mut best: Option<RougeScore> = None;
    for r in references {
        let s = score(candidate, r, variant)?;
        if best.map_or(true, |b| s.f1 > b.f1) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::Config("score_multi requires at least one reference".into()))
}

/// Area under the ROC curve via the rank statistic, ties averaged.
pub fn posterior_auc(belief: &[f64], gold_mask: &[u8]) -> Result<f64> {
    if belief.len() != gold_mask.len() {
        return Err(Error::Invariant(format!(
            "belief length {} does not match mask length {}",
            belief.len(),
            gold_mask.len()
        )));
    }
    let n_pos = gold_mask.iter().filter(|&&m| m == 1).count();
    let n_neg = gold_mask.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "posterior_auc is undefined for a single-class mask".into(),
        ));
    }
    // ranks with ties averaged
    let mut order: Vec<usize> = (0..belief.len()).collect();
    order.sort_by(|&a, &b| belief[a].partial_cmp(&belief[b]).unwrap());
    let mut ranks = vec![0.0f64; belief.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && belief[order[j + 1]] == belief[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..belief.len())
        .filter(|&k| gold_mask[k] == 1)
        .map(|k| ranks[k])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
