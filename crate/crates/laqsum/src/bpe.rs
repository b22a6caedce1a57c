//! Trainable byte-pair encoding tokenizer.
//!
//! Words carry a boundary-marker prefix on their first character so that
//! decoding reconstructs whitespace exactly and so that weak labels
//! project deterministically between word and unit level. A unit that
//! begins a word and the same character sequence mid-word are distinct
//! units with distinct ids.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Word-boundary marker prefixed to the first symbol of every word.
pub const BOUNDARY: char = '\u{2581}'; // ▁

/// Ids at or above this value denote unknown single-character units that
/// were never seen in training; they are derived from the codepoint and
/// never stored in the table.
pub const OVERFLOW_BASE: usize = 1 << 24;

/// Ordered merge rules plus the unit vocabulary learned from a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTable {
    /// Merge rules in training order.
    pub merges: Vec<(String, String)>,
    /// Unit id -> surface. Base symbols first (sorted), then merged units
    /// in rule order.
    pub vocab: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl MergeTable {
    fn from_parts(vocab: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(vocab.len());
        for (i, u) in vocab.iter().enumerate() {
            if id_of.insert(u.clone(), i).is_some() {
                return Err(Error::Invariant(format!("duplicate unit in vocab: {u}")));
            }
        }
        Ok(Self {
            merges,
            vocab,
            id_of,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.id_of.get(unit).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            writeln!(f, "laqsum-bpe v1")?;
            writeln!(f, "base {}", self.vocab.len() - self.merges.len())?;
            for u in &self.vocab[..self.vocab.len() - self.merges.len()] {
                writeln!(f, "{u}")?;
            }
            writeln!(f, "merges {}", self.merges.len())?;
            for (a, b) in &self.merges {
                writeln!(f, "{a} {b}")?;
            }
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Data {
            path: path.display().to_string(),
            msg,
        };
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()
                .map_err(Error::from)?
                .ok_or_else(|| err("unexpected end of merge table".into()))
        };
        let header = next()?;
        if header != "laqsum-bpe v1" {
            return Err(err(format!("bad header {header:?}")));
        }
        let base_line = next()?;
        let n_base: usize = base_line
            .strip_prefix("base ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad base line {base_line:?}")))?;
        let mut vocab = Vec::with_capacity(n_base);
        for _ in 0..n_base {
            vocab.push(next()?);
        }
        let merges_line = next()?;
        let n_merges: usize = merges_line
            .strip_prefix("merges ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad merges line {merges_line:?}")))?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = next()?;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| err(format!("bad merge rule {line:?}")))?;
            vocab.push(format!("{a}{b}"));
            merges.push((a.to_string(), b.to_string()));
        }
        Self::from_parts(vocab, merges)
    }
}

/// A text as parallel lists of unit ids, surfaces, and source-word
/// positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BpeSequence {
    pub ids: Vec<usize>,
    pub surfaces: Vec<String>,
    pub word_index: Vec<usize>,
}

impl BpeSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.surfaces.len() || self.ids.len() != self.word_index.len() {
            return Err(Error::Invariant(format!(
                "BpeSequence parallel lists disagree: {} ids, {} surfaces, {} word indices",
                self.ids.len(),
                self.surfaces.len(),
                self.word_index.len()
            )));
        }
        Ok(())
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, c) in word.chars().enumerate() {
        if i == 0 {
            out.push(format!("{BOUNDARY}{c}"));
        } else {
            out.push(c.to_string());
        }
    }
    out
}

fn apply_merges(symbols: &mut Vec<String>, merges: &[(String, String)]) {
    for (a, b) in merges {
        let mut i = 0;
        while i + 1 < symbols.len() {
            if symbols[i] == *a && symbols[i + 1] == *b {
                symbols[i] = format!("{a}{b}");
                symbols.remove(i + 1);
            } else {
                i += 1;
            }
        }
    }
}

/// Greedy most-frequent-pair merge training. Ties on count break toward
/// the lexicographically smallest pair so retraining is deterministic.
pub fn train_bpe(corpus: &[String], num_merges: usize) -> Result<MergeTable> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot train BPE on an empty corpus".into()));
    }
    // word -> count, with words held as symbol sequences
    let mut words: HashMap<Vec<String>, usize> = HashMap::new();
    for text in corpus {
        for w in text.split_whitespace() {
            *words.entry(word_symbols(w)).or_insert(0) += 1;
        }
    }
    let mut base: Vec<String> = {
        let mut set: Vec<String> = words
            .keys()
            .flat_map(|syms| syms.iter().cloned())
            .collect();
        set.sort();
        set.dedup();
        set
    };

    let mut merges: Vec<(String, String)> = Vec::new();
    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
        for (syms, &count) in &words {
            for w in syms.windows(2) {
                *pair_counts
                    .entry((w[0].clone(), w[1].clone()))
                    .or_insert(0) += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, count)) = best else { break };
        if count == 0 {
            break;
        }
        let rule = [pair.clone()];
        let mut next_words: HashMap<Vec<String>, usize> = HashMap::with_capacity(words.len());
        for (mut syms, count) in words.drain() {
            apply_merges(&mut syms, &rule);
            *next_words.entry(syms).or_insert(0) += count;
        }
        words = next_words;
        base.push(format!("{}{}", pair.0, pair.1));
        merges.push(pair);
    }
    MergeTable::from_parts(base, merges)
}

fn overflow_id(surface: &str) -> usize {
    // Deterministic id for a single unknown character, optionally carrying
    // the boundary marker.
    let mut chars = surface.chars();
    let first = chars.next().unwrap_or('\0');
    if first == BOUNDARY {
        let c = chars.next().unwrap_or('\0');
        OVERFLOW_BASE + 2 * (c as usize) + 1
    } else {
        OVERFLOW_BASE + 2 * (first as usize)
    }
}

/// Applies the merge table to `text`. Unknown characters become
/// single-character units with deterministic overflow ids.
pub fn encode(text: &str, table: &MergeTable) -> BpeSequence {
    let mut seq = BpeSequence::default();
    let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
    for (wi, word) in text.split_whitespace().enumerate() {
        let units = cache.entry(word).or_insert_with(|| {
            let mut syms = word_symbols(word);
            apply_merges(&mut syms, &table.merges);
            syms
        });
        for u in units.iter() {
            let id = table.id(u).unwrap_or_else(|| overflow_id(u));
            seq.ids.push(id);
            seq.surfaces.push(u.clone());
            seq.word_index.push(wi);
        }
    }
    seq
}

/// Exact inverse of [`encode`] for single-space separated text.
pub fn decode(seq: &BpeSequence) -> Result<String> {
    seq.validate()?;
    let mut out = String::new();
    for s in &seq.surfaces {
        if let Some(rest) = s.strip_prefix(BOUNDARY) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(rest);
        } else {
            out.push_str(s);
        }
    }
    Ok(out)
}
