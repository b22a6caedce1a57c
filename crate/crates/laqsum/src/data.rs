//! Corpus ingestion and the synthetic query-copy corpus.
//!
//! Synthetic documents are background-word sequences containing marked
//! spans: a marker token introduces a short run of content words. The
//! query names the markers of the chosen spans and the summary is the
//! concatenation of those spans (marker included), so summary tokens are
//! copied from the document by construction and BPE-LCS weak labels
//! recover the ground-truth mask on clean data.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizationExample {
    pub id: String,
    pub document: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// Ground-truth word-level query mask (synthetic corpora only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<u8>>,
}

impl SummarizationExample {
    pub fn validate_for_training(&self) -> Result<()> {
        if self.document.trim().is_empty() {
            return Err(Error::Invariant(format!(
                "example {}: empty document",
                self.id
            )));
        }
        match &self.summary {
            Some(s) if !s.trim().is_empty() => Ok(()),
            _ => Err(Error::Invariant(format!(
                "example {}: training example requires a non-empty summary",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    /// Marked spans per document.
    pub num_spans: usize,
    /// Spans the query selects (the rest stay unreferenced).
    pub num_chosen: usize,
    pub span_len_min: usize,
    pub span_len_max: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            doc_len_min: 40,
            doc_len_max: 56,
            num_spans: 4,
            num_chosen: 1,
            span_len_min: 2,
            span_len_max: 3,
            noise_rate: 0.0,
            seed: 13,
        }
    }
}

pub const NUM_MARKERS: usize = 12;

fn marker_word(k: usize) -> String {
    format!("mk{k}")
}

fn filler_word(k: usize) -> String {
    format!("wf{k}")
}

fn content_word(k: usize) -> String {
    format!("zc{k}")
}

/// Background positions mix dedicated filler words with content-vocabulary
/// words, so span membership is structural (position relative to a marker)
/// rather than readable off the word's identity alone.
fn background_word(vocab: usize, rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.5) {
        filler_word(rng.gen_range(0..vocab))
    } else {
        content_word(rng.gen_range(0..vocab))
    }
}

struct DocLayout {
    words: Vec<String>,
    /// (marker id, word positions covered) per span, in document order.
    spans: Vec<(usize, Vec<usize>)>,
}

fn build_document(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<DocLayout> {
    let doc_len = rng.gen_range(spec.doc_len_min..=spec.doc_len_max);
    let span_lens: Vec<usize> = (0..spec.num_spans)
        .map(|_| rng.gen_range(spec.span_len_min..=spec.span_len_max))
        .collect();
    let occupied: usize = span_lens.iter().map(|l| l + 1).sum();
    if occupied > doc_len {
        return Err(Error::Config(format!(
            "infeasible synthetic spec: spans need {occupied} tokens but document length is {doc_len}"
        )));
    }
    if spec.num_spans > NUM_MARKERS {
        return Err(Error::Config(format!(
            "at most {NUM_MARKERS} spans per document are supported"
        )));
    }
    // distinct markers for this document
    let mut markers: Vec<usize> = (0..NUM_MARKERS).collect();
    markers.shuffle(rng);
    markers.truncate(spec.num_spans);

    // distribute the slack as random gaps before each span and at the end
    let slack = doc_len - occupied;
    let mut cuts: Vec<usize> = (0..spec.num_spans).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut gaps = Vec::with_capacity(spec.num_spans + 1);
    let mut prev = 0;
    for &c in &cuts {
        gaps.push(c - prev);
        prev = c;
    }
    gaps.push(slack - prev);

    let mut words = Vec::with_capacity(doc_len);
    let mut spans = Vec::with_capacity(spec.num_spans);
    for (si, (&marker, &len)) in markers.iter().zip(&span_lens).enumerate() {
        for _ in 0..gaps[si] {
            words.push(background_word(spec.vocab_size, rng));
        }
        let mut positions = vec![words.len()];
        words.push(marker_word(marker));
        for _ in 0..len {
            positions.push(words.len());
            words.push(content_word(rng.gen_range(0..spec.vocab_size)));
        }
        spans.push((marker, positions));
    }
    for _ in 0..gaps[spec.num_spans] {
        words.push(background_word(spec.vocab_size, rng));
    }
    Ok(DocLayout { words, spans })
}

fn compose_example(
    id: String,
    layout: &DocLayout,
    chosen: &[usize], // indices into layout.spans, document order
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<SummarizationExample> {
    let mut summary_words = Vec::new();
    let mut mask = vec![0u8; layout.words.len()];
    let mut query_words = Vec::new();
    for &si in chosen {
        let (marker, positions) = &layout.spans[si];
        // keyword-style query naming the span marker; calibration anchors
        // on its document occurrence and the model must complete the span
        query_words.push(marker_word(*marker));
        for &p in positions {
            mask[p] = 1;
            let mut w = layout.words[p].clone();
            if spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
                w = content_word(rng.gen_range(0..spec.vocab_size));
            }
            summary_words.push(w);
        }
    }
    let ex = SummarizationExample {
        id,
        document: layout.words.join(" "),
        query: Some(query_words.join(" ")),
        summary: Some(summary_words.join(" ")),
        mask: Some(mask),
    };
    ex.validate_for_training()?;
    Ok(ex)
}

/// Generates `n` labeled training examples.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<SummarizationExample>> {
    if n < 1 {
        return Err(Error::Config("synthetic corpus size must be >= 1".into()));
    }
    if spec.num_chosen == 0 || spec.num_chosen > spec.num_spans {
        return Err(Error::Config(format!(
            "num_chosen must be in 1..=num_spans, got {} of {}",
            spec.num_chosen, spec.num_spans
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let layout = build_document(spec, &mut rng)?;
        let mut chosen: Vec<usize> = (0..spec.num_spans).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(spec.num_chosen);
        chosen.sort_unstable();
        out.push(compose_example(
            format!("synth-{i}"),
            &layout,
            &chosen,
            spec,
            &mut rng,
        )?);
    }
    Ok(out)
}

/// Held-out documents with two candidate queries each: the paired
/// examples share a document but select different spans.
pub fn generate_eval_pairs(
    spec: &SyntheticSpec,
    n_docs: usize,
) -> Result<Vec<(SummarizationExample, SummarizationExample)>> {
    if spec.num_spans < 2 {
        return Err(Error::Config(
            "eval pairs need at least two spans per document".into(),
        ));
    }
    // offset seed so eval documents never collide with training ones
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9));
    let mut out = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let layout = build_document(spec, &mut rng)?;
        let mut picks: Vec<usize> = (0..spec.num_spans).collect();
        picks.shuffle(&mut rng);
        let a = compose_example(
            format!("synth-eval-{i}-q0"),
            &layout,
            &[picks[0]],
            spec,
            &mut rng,
        )?;
        let b = compose_example(
            format!("synth-eval-{i}-q1"),
            &layout,
            &[picks[1]],
            spec,
            &mut rng,
        )?;
        out.push((a, b));
    }
    Ok(out)
}

/// Strict or lenient JSONL corpus loading. Lenient mode skips malformed
/// rows, reporting each with its line number.
pub fn load_jsonl(path: &Path, strict: bool) -> Result<(Vec<SummarizationExample>, Vec<String>)> {
    let f = BufReader::new(std::fs::File::open(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?);
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line.map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: format!("line {}: {}", lineno + 1, e),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SummarizationExample>(&line) {
            Ok(ex) => out.push(ex),
            Err(e) => {
                let msg = format!("line {}: {}", lineno + 1, e);
                if strict {
                    return Err(Error::Data {
                        path: path.display().to_string(),
                        msg,
                    });
                }
                warnings.push(msg);
            }
        }
    }
    if out.is_empty() && warnings.is_empty() {
        warnings.push(format!("{}: empty corpus file", path.display()));
    }
    Ok((out, warnings))
}

/// Atomic JSONL write (temp file + rename).
pub fn write_jsonl(path: &Path, examples: &[SummarizationExample]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for ex in examples {
            writeln!(f, "{}", serde_json::to_string(ex)?)?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A multi-document cluster: documents plus one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCluster {
    #[serde(default)]
    pub id: String,
    pub documents: Vec<String>,
    #[serde(default)]
    pub query: String,
}

/// Loads clusters either from a JSONL file (`{"documents": [...],
/// "query": "..."}`) or from a directory of cluster subdirectories, each
/// holding document text files plus `query.txt`.
pub fn load_clusters(path: &Path) -> Result<Vec<RawCluster>> {
    if path.is_file() {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut c: RawCluster = serde_json::from_str(&line).map_err(|e| Error::Data {
                path: path.display().to_string(),
                msg: format!("line {}: {}", lineno + 1, e),
            })?;
            if c.id.is_empty() {
                c.id = format!("cluster-{lineno}");
            }
            out.push(c);
        }
        return Ok(out);
    }
    let mut dirs: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    // flat layout: the path itself is a single cluster
    let candidates = if dirs.is_empty() { vec![path.to_path_buf()] } else { dirs };
    let mut out = Vec::new();
    for dir in candidates {
        let mut files: Vec<_> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut documents = Vec::new();
        let mut query = String::new();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::Data {
                path: f.display().to_string(),
                msg: e.to_string(),
            })?;
            if f.file_name().map_or(false, |n| n == "query.txt") {
                query = text.trim().to_string();
            } else {
                documents.push(text);
            }
        }
        if documents.is_empty() {
            return Err(Error::Data {
                path: dir.display().to_string(),
                msg: "cluster directory contains no document files".into(),
            });
        }
        out.push(RawCluster {
            id: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            documents,
            query,
        });
    }
    Ok(out)
}

/// Sanity statistic used by corpus checks: fraction of ground-truth mask
/// positions recovered by projected weak labels.
pub fn mask_recall(gold: &[u8], predicted: &[u8]) -> f64 {
    let pos: usize = gold.iter().filter(|&&g| g == 1).count();
    if pos == 0 {
        return 1.0;
    }
    let hit: usize = gold
        .iter()
        .zip(predicted)
        .filter(|(&g, &p)| g == 1 && p == 1)
        .count();
    hit as f64 / pos as f64
}

pub fn distinct_markers(text: &str) -> HashSet<String> {
    text.split_whitespace()
        .filter(|w| w.starts_with("mk"))
        .map(|w| w.to_string())
        .collect()
}
