//! Weak supervision from longest-common-subsequence alignment.
//!
//! The production scheme aligns document and summary at BPE-unit
//! granularity; word-level and character-level baselines are kept for
//! error analysis. Among all maximum-length embeddings the one with the
//! lexicographically smallest document positions is labeled positive.

use serde::{Deserialize, Serialize};

use crate::bpe::BpeSequence;
use crate::error::{Error, Result};

/// Binary per-position annotation aligned to some sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub labels: Vec<u8>,
    pub positive_count: usize,
}

impl WeakLabels {
    pub fn from_positive_indices(len: usize, indices: &[usize]) -> Self {
        let mut labels = vec![0u8; len];
        for &i in indices {
            labels[i] = 1;
        }
        Self {
            labels,
            positive_count: indices.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Document positions of the earliest maximum-length common subsequence.
///
/// Suffix DP plus a greedy walk: a match is taken whenever it preserves
/// maximality; otherwise skipping a target token is preferred over
/// skipping a document token, which keeps earlier document positions
/// available and yields the lexicographically smallest index vector.
pub fn lcs_indices<T: PartialEq>(doc: &[T], target: &[T]) -> Vec<usize> {
    let m = doc.len();
    let t = target.len();
    // l[i][j] = LCS length of doc[i..] and target[j..]
    let mut l = vec![0usize; (m + 1) * (t + 1)];
    let at = |i: usize, j: usize| i * (t + 1) + j;
    for i in (0..m).rev() {
        for j in (0..t).rev() {
            l[at(i, j)] = if doc[i] == target[j] {
                l[at(i + 1, j + 1)] + 1
            } else {
                l[at(i + 1, j)].max(l[at(i, j + 1)])
            };
        }
    }
    let mut out = Vec::with_capacity(l[at(0, 0)]);
    let (mut i, mut j) = (0, 0);
    while i < m && j < t {
        if doc[i] == target[j] && l[at(i, j)] == l[at(i + 1, j + 1)] + 1 {
            out.push(i);
            i += 1;
            j += 1;
        } else if l[at(i, j)] == l[at(i, j + 1)] {
            j += 1;
        } else {
            i += 1;
        }
    }
    out
}

/// BPE-level alignment: LCS over unit ids. Two units with equal surface
/// but different boundary markers have different ids and never match.
pub fn lcs_align(doc: &BpeSequence, target: &BpeSequence) -> WeakLabels {
    let indices = lcs_indices(&doc.ids, &target.ids);
    WeakLabels::from_positive_indices(doc.len(), &indices)
}

/// Word-level baseline: same DP and tie-break over whitespace tokens.
pub fn lcs_word<W: AsRef<str>>(doc_words: &[W], summary_words: &[W]) -> WeakLabels {
    let d: Vec<&str> = doc_words.iter().map(|w| w.as_ref()).collect();
    let s: Vec<&str> = summary_words.iter().map(|w| w.as_ref()).collect();
    let indices = lcs_indices(&d, &s);
    WeakLabels::from_positive_indices(d.len(), &indices)
}

/// Character-level baseline (word-boundary-agnostic): the summary is
/// treated as one character sequence; a document word is positive when
/// every one of its characters lies on the LCS. Reproduces the
/// false-positive failure mode of character-granular matching.
pub fn lcs_char<W: AsRef<str>>(doc_words: &[W], summary_words: &[W]) -> WeakLabels {
    let mut doc_chars = Vec::new();
    let mut char_word = Vec::new();
    for (wi, w) in doc_words.iter().enumerate() {
        for c in w.as_ref().chars() {
            doc_chars.push(c);
            char_word.push(wi);
        }
    }
    let summary_chars: Vec<char> = summary_words
        .iter()
        .flat_map(|w| w.as_ref().chars().collect::<Vec<_>>())
        .collect();
    let matched = lcs_indices(&doc_chars, &summary_chars);
    let mut matched_per_word = vec![0usize; doc_words.len()];
    for &ci in &matched {
        matched_per_word[char_word[ci]] += 1;
    }
    let indices: Vec<usize> = doc_words
        .iter()
        .enumerate()
        .filter(|(wi, w)| {
            let n = w.as_ref().chars().count();
            n > 0 && matched_per_word[*wi] == n
        })
        .map(|(wi, _)| wi)
        .collect();
    WeakLabels::from_positive_indices(doc_words.len(), &indices)
}

/// Projects unit-level labels to word level: a word is positive iff any
/// of its units is positive.
pub fn project_labels(labels: &WeakLabels, from: &BpeSequence) -> Result<Vec<u8>> {
    from.validate()?;
    if labels.len() != from.len() {
        return Err(Error::Invariant(format!(
            "label length {} does not match sequence length {}",
            labels.len(),
            from.len()
        )));
    }
    let n_words = from.word_index.last().map_or(0, |&w| w + 1);
    let mut out = vec![0u8; n_words];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == 1 {
            out[from.word_index[i]] = 1;
        }
    }
    Ok(out)
}

/// One row of a corpus annotation dump.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub doc_units: Vec<String>,
    pub labels: Vec<u8>,
    pub summary_units: Vec<String>,
}

impl AnnotationRecord {
    pub fn new(id: &str, doc: &crate::bpe::BpeSequence, summary: &crate::bpe::BpeSequence) -> Self {
        let labels = lcs_align(doc, summary);
        Self {
            id: id.to_string(),
            doc_units: doc.surfaces.clone(),
            labels: labels.labels,
            summary_units: summary.surfaces.clone(),
        }
    }
}

/// Tab-separated report of words where the word-level baseline and the
/// BPE-level scheme disagree (Type I / Type II candidates).
pub fn diff_report<W: AsRef<str>>(doc_words: &[W], word_baseline: &[u8], bpe_projected: &[u8]) -> String {
    let mut out = String::from("position\tword\tword_lcs\tbpe_lcs\tkind\n");
    for (i, w) in doc_words.iter().enumerate() {
        let wb = word_baseline.get(i).copied().unwrap_or(0);
        let bp = bpe_projected.get(i).copied().unwrap_or(0);
        if wb != bp {
            let kind = if wb == 1 { "type1_candidate" } else { "type2_fix" };
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", i, w.as_ref(), wb, bp, kind));
        }
    }
    out
}
