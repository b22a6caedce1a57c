//! Multi-document composition: rank documents by query-term coverage,
//! summarize them one at a time, and append novel sentences until a
//! word budget is exhausted.

use crate::bpe::encode;
use crate::error::Result;
use crate::model::Summarizer;
use crate::rouge::tokenize;
use crate::tensor::Scalar;

pub const DEFAULT_BUDGET_WORDS: usize = 250;
/// Sentences whose content-word overlap F1 with an already selected
/// sentence reaches this value are considered redundant.
pub const REDUNDANCY_F1: f64 = 0.7;

#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: String,
    pub documents: Vec<String>,
    pub query: String,
    pub budget_words: usize,
}

impl Cluster {
    pub fn new(id: impl Into<String>, documents: Vec<String>, query: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            documents,
            query: query.into(),
            budget_words: DEFAULT_BUDGET_WORDS,
        }
    }
}

/// Orders document indices by descending count of query unit ids
/// appearing in the document's unit ids. Stable: ties keep input order.
pub fn rank_documents<S: Scalar>(summarizer: &Summarizer<S>, cluster: &Cluster) -> Vec<usize> {
    let query_units = encode(&cluster.query, &summarizer.table);
    let scores: Vec<usize> = crate::par::map(&cluster.documents, |doc| {
        let doc_units = encode(doc, &summarizer.table);
        query_units
            .ids
            .iter()
            .map(|qid| doc_units.ids.iter().filter(|&&d| d == *qid).count())
            .sum()
    });
    let mut order: Vec<usize> = (0..cluster.documents.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(scores[i]));
    order
}

/// Splits on sentence-terminal punctuation followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                Some(n) if n.is_whitespace() => {
                    let s = current.trim().to_string();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    current.clear();
                }
                None => {}
                _ => {}
            }
        }
    }
    let s = current.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

fn content_words(sentence: &str) -> Vec<String> {
    tokenize(sentence)
}

fn overlap_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for w in a {
        *counts.entry(w.as_str()).or_insert(0usize) += 1;
    }
    let mut hit = 0usize;
    for w in b {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                hit += 1;
            }
        }
    }
    if hit == 0 {
        return 0.0;
    }
    let p = hit as f64 / b.len() as f64;
    let r = hit as f64 / a.len() as f64;
    2.0 * p * r / (p + r)
}

fn normalized(sentence: &str) -> String {
    tokenize(sentence).join(" ")
}

#[derive(Debug, Clone)]
pub struct ClusterSummary {
    pub text: String,
    pub sentences: Vec<String>,
    /// Document indices that failed to produce a summary.
    pub skipped_documents: Vec<usize>,
    pub word_count: usize,
}

/// Summarizes each document in ranked order, appending sentences that
/// are not redundant with the selection so far, until the word budget
/// is reached. The final sentence is truncated at a word boundary if
/// it would overflow the budget. Documents that fail to summarize are
/// skipped with a warning, not fatal.
pub fn iterative_summarize<S: Scalar>(
    summarizer: &Summarizer<S>,
    cluster: &Cluster,
) -> Result<ClusterSummary> {
    let order = rank_documents(summarizer, cluster);
    let mut selected: Vec<String> = Vec::new();
    let mut selected_tokens: Vec<Vec<String>> = Vec::new();
    let mut seen_normalized: Vec<String> = Vec::new();
    let mut skipped = Vec::new();
    let mut words_used = 0usize;

    'docs: for &idx in &order {
        if words_used >= cluster.budget_words {
            break;
        }
        let doc = &cluster.documents[idx];
        let decode = crate::model::DecodeConfig::default();
        let summary = match summarizer.summarize_text(doc, Some(&cluster.query), &decode) {
            Ok(s) => s,
            Err(e) => {
                eprintln!(
                    "warning: cluster {}: document {} failed to summarize: {}",
                    cluster.id, idx, e
                );
                skipped.push(idx);
                continue;
            }
        };
        for sentence in split_sentences(&summary) {
            let norm = normalized(&sentence);
            if norm.is_empty() || seen_normalized.iter().any(|s| *s == norm) {
                continue;
            }
            let toks = content_words(&sentence);
            if selected_tokens.iter().any(|prev| overlap_f1(prev, &toks) >= REDUNDANCY_F1) {
                continue;
            }
            let words: Vec<&str> = sentence.split_whitespace().collect();
            let remaining = cluster.budget_words - words_used;
            if words.len() > remaining {
                if remaining > 0 {
                    selected.push(words[..remaining].join(" "));
                    words_used += remaining;
                }
                break 'docs;
            }
            words_used += words.len();
            seen_normalized.push(norm);
            selected_tokens.push(toks);
            selected.push(sentence);
            if words_used >= cluster.budget_words {
                break 'docs;
            }
        }
    }

    Ok(ClusterSummary {
        text: selected.join(" "),
        sentences: selected.clone(),
        skipped_documents: skipped,
        word_count: words_used,
    })
}
