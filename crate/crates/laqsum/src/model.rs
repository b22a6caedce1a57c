//! Conditional language model: shared encoder branching into document
//! and query encoders, a decoder that cross-attends to the query-focused
//! view and then the query-agnostic view, teacher-forced loss, and
//! autoregressive generation with optional query calibration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{decode as bpe_decode, encode as bpe_encode, BpeSequence, MergeTable};
use crate::error::{Error, Result};
use crate::latent::{self, calibrate, PosteriorMode, QueryBelief};
use crate::nn::{self, causal_mask, pad_mask};
use crate::params::{ModelParams, ParamVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossAttentionOrder {
    /// Paper wiring: query-focused view first, then query-agnostic.
    QueryFirst,
    /// Config-gated variant used to guard against silent mis-wiring.
    DocumentFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_h: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub n_shared_layers: usize,
    pub n_decoder_layers: usize,
    pub max_source_length: usize,
    pub max_target_length: usize,
    pub cross_attention_order: CrossAttentionOrder,
    /// When false, only the first decoder layer carries the dual
    /// cross-attention block.
    pub cross_attention_every_layer: bool,
    /// When false, the decoder attends to the query-focused view only
    /// (ablation).
    pub dual_view: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            num_heads: 4,
            d_ff: 256,
            n_shared_layers: 2,
            n_decoder_layers: 2,
            max_source_length: 128,
            max_target_length: 32,
            cross_attention_order: CrossAttentionOrder::QueryFirst,
            cross_attention_every_layer: true,
            dual_view: true,
        }
    }
}

/// Maps tokenizer unit ids into the model vocabulary, which appends the
/// special sentinels after the BPE units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub bpe_size: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.bpe_size + 4
    }
    pub fn pad(&self) -> usize {
        self.bpe_size
    }
    pub fn bos(&self) -> usize {
        self.bpe_size + 1
    }
    pub fn eos(&self) -> usize {
        self.bpe_size + 2
    }
    pub fn unk(&self) -> usize {
        self.bpe_size + 3
    }
    /// Raw tokenizer ids outside the trained vocabulary (overflow units)
    /// collapse to `unk`.
    pub fn map_id(&self, raw: usize) -> usize {
        if raw < self.bpe_size {
            raw
        } else {
            self.unk()
        }
    }
}

/// The two encodings consumed by the decoder.
pub struct DualView {
    pub q: Var,
    pub d: Var,
}

/// Registers every model parameter (encoders, decoder, output head, and
/// the inference network).
pub fn init_model<S: Scalar>(
    params: &mut ModelParams<S>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = cfg.d_h;
    params.init_matrix("embed.tok", vocab.size(), d, rng)?;
    let max_len = cfg.max_source_length.max(cfg.max_target_length + 2);
    params.init_matrix("embed.pos", max_len, d, rng)?;
    for i in 0..cfg.n_shared_layers {
        nn::init_encoder_layer(params, &format!("enc.shared.{i}"), d, cfg.d_ff, rng)?;
    }
    nn::init_encoder_layer(params, "enc.doc", d, cfg.d_ff, rng)?;
    nn::init_encoder_layer(params, "enc.query", d, cfg.d_ff, rng)?;
    for i in 0..cfg.n_decoder_layers {
        let p = format!("dec.{i}");
        nn::init_mha(params, &format!("{p}.self"), d, rng)?;
        nn::init_layer_norm(params, &format!("{p}.ln_self"), d)?;
        nn::init_mha(params, &format!("{p}.xq"), d, rng)?;
        nn::init_layer_norm(params, &format!("{p}.ln_xq"), d)?;
        nn::init_mha(params, &format!("{p}.xd"), d, rng)?;
        nn::init_layer_norm(params, &format!("{p}.ln_xd"), d)?;
        nn::init_ffn(params, &format!("{p}.ffn"), d, cfg.d_ff, rng)?;
        nn::init_layer_norm(params, &format!("{p}.ln_ffn"), d)?;
    }
    params.init_matrix("out.w", d, vocab.size(), rng)?;
    params.init_zeros("out.b", vec![vocab.size()])?;
    latent::init_inference_net(params, d, rng)?;
    Ok(())
}

fn embed_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    ids: &[usize],
) -> Result<Var> {
    let tok = vars.get("embed.tok")?;
    let pos = vars.get("embed.pos")?;
    let te = tape.embedding(tok, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pe = tape.embedding(pos, &positions)?;
    tape.add(te, pe)
}

/// Runs the shared encoder then branches into the document view `D` and
/// the query encoding `H_q`. Documents longer than `max_source_length`
/// are clipped; an empty document is an error.
pub fn encode_views<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    doc_ids: &[usize],
) -> Result<(Var, Var)> {
    if doc_ids.is_empty() {
        return Err(Error::Config("cannot encode an empty document".into()));
    }
    let ids = &doc_ids[..doc_ids.len().min(cfg.max_source_length)];
    let mut h = embed_sequence(tape, vars, ids)?;
    for i in 0..cfg.n_shared_layers {
        h = nn::encoder_layer(tape, vars, &format!("enc.shared.{i}"), h, cfg.num_heads, None)?;
    }
    let d_view = nn::encoder_layer(tape, vars, "enc.doc", h, cfg.num_heads, None)?;
    let h_q = nn::encoder_layer(tape, vars, "enc.query", h, cfg.num_heads, None)?;
    Ok((h_q, d_view))
}

/// Decoder stack over a teacher-forced prefix (must start with BOS).
/// Every layer: causal self-attention, cross-attention over the views in
/// the configured order, then FFN, each with residual + layernorm.
pub fn decoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    vocab: &Vocab,
    prefix: &[usize],
    views: &DualView,
    src_pad: Option<&[bool]>,
) -> Result<Var> {
    if prefix.first() != Some(&vocab.bos()) {
        return Err(Error::Invariant(
            "decoder prefix must begin with the begin-sentinel".into(),
        ));
    }
    if prefix.len() > cfg.max_target_length + 1 {
        return Err(Error::Config(format!(
            "decoder prefix length {} exceeds max target length {}",
            prefix.len(),
            cfg.max_target_length
        )));
    }
    let t = prefix.len();
    let m = tape.shape(views.q)[0];
    let self_mask = causal_mask(t);
    let cross_mask = src_pad.map(|p| pad_mask(t, p));
    let mut h = embed_sequence(tape, vars, prefix)?;
    for i in 0..cfg.n_decoder_layers {
        let p = format!("dec.{i}");
        let sa = nn::multi_head_attention(
            tape,
            vars,
            &format!("{p}.self"),
            h,
            h,
            h,
            cfg.num_heads,
            Some(&self_mask),
        )?;
        let x = tape.add(h, sa)?;
        h = nn::layer_norm(tape, vars, &format!("{p}.ln_self"), x)?;

        let with_cross = cfg.cross_attention_every_layer || i == 0;
        if with_cross {
            let order: &[(Var, &str)] = match (cfg.dual_view, cfg.cross_attention_order) {
                (false, _) => &[(views.q, "xq")],
                (true, CrossAttentionOrder::QueryFirst) => &[(views.q, "xq"), (views.d, "xd")],
                (true, CrossAttentionOrder::DocumentFirst) => &[(views.d, "xd"), (views.q, "xq")],
            };
            for &(view, tag) in order {
                debug_assert_eq!(tape.shape(view)[0], m);
                let ca = nn::multi_head_attention(
                    tape,
                    vars,
                    &format!("{p}.{tag}"),
                    h,
                    view,
                    view,
                    cfg.num_heads,
                    cross_mask.as_deref(),
                )?;
                let x = tape.add(h, ca)?;
                h = nn::layer_norm(tape, vars, &format!("{p}.ln_{tag}"), x)?;
            }
        }

        let f = nn::ffn(tape, vars, &format!("{p}.ffn"), h)?;
        let x = tape.add(h, f)?;
        h = nn::layer_norm(tape, vars, &format!("{p}.ln_ffn"), x)?;
    }
    let w = vars.get("out.w")?;
    let b = vars.get("out.b")?;
    let logits = tape.matmul(h, w)?;
    tape.add_bias_row(logits, b)
}

/// Mean negative log-likelihood over non-pad target positions.
pub fn lm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &[usize],
    vocab: &Vocab,
) -> Result<Var> {
    let keep: Vec<bool> = targets.iter().map(|&t| t != vocab.pad()).collect();
    tape.softmax_xent_rows(logits, targets, &keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_width: usize,
    pub max_target_length: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            beam_width: 4,
            max_target_length: 32,
            length_penalty: 1.0,
        }
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - maxv).exp()).sum::<f64>().ln() + maxv;
    row.iter().map(|&x| x - lse).collect()
}

/// Autoregressive decode from prepared views. Greedy by default; beam
/// search scores candidates by total log-probability divided by
/// `len^length_penalty`.
pub fn decode_ids<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    vocab: &Vocab,
    views: &DualView,
    decode: &DecodeConfig,
) -> Result<Vec<usize>> {
    let max_len = decode.max_target_length.min(cfg.max_target_length);
    match decode.strategy {
        DecodeStrategy::Greedy => {
            let mut prefix = vec![vocab.bos()];
            loop {
                let logits = decoder_forward(tape, vars, cfg, vocab, &prefix, views, None)?;
                let n = tape.shape(logits)[1];
                let t = tape.shape(logits)[0];
                let row = &tape.data(logits)[(t - 1) * n..t * n];
                let mut best = 0;
                for j in 1..n {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == vocab.eos() || prefix.len() >= max_len {
                    break;
                }
                prefix.push(best);
            }
            Ok(prefix[1..].to_vec())
        }
        DecodeStrategy::Beam => {
            let width = decode.beam_width.max(1);
            // (ids after BOS, total logprob, finished)
            let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
            // BOS occupies one slot, matching the greedy budget
            for _ in 0..max_len.saturating_sub(1) {
                if beams.iter().all(|b| b.2) {
                    break;
                }
                let mut cand: Vec<(Vec<usize>, f64, bool)> = Vec::new();
                for (ids, lp, done) in &beams {
                    if *done {
                        cand.push((ids.clone(), *lp, true));
                        continue;
                    }
                    let mut prefix = vec![vocab.bos()];
                    prefix.extend_from_slice(ids);
                    let logits = decoder_forward(tape, vars, cfg, vocab, &prefix, views, None)?;
                    let n = tape.shape(logits)[1];
                    let t = tape.shape(logits)[0];
                    let row: Vec<f64> = tape.data(logits)[(t - 1) * n..t * n]
                        .iter()
                        .map(|v| v.to_f64_())
                        .collect();
                    let logp = log_softmax_row(&row);
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap());
                    for &j in idx.iter().take(width) {
                        let mut next = ids.clone();
                        let finished = j == vocab.eos();
                        if !finished {
                            next.push(j);
                        }
                        cand.push((next, lp + logp[j], finished));
                    }
                }
                let penalty = |b: &(Vec<usize>, f64, bool)| {
                    b.1 / ((b.0.len().max(1)) as f64).powf(decode.length_penalty)
                };
                cand.sort_by(|a, b| penalty(b).partial_cmp(&penalty(a)).unwrap());
                cand.truncate(width);
                beams = cand;
            }
            let best = beams
                .into_iter()
                .max_by(|a, b| {
                    let pa = a.1 / ((a.0.len().max(1)) as f64).powf(decode.length_penalty);
                    let pb = b.1 / ((b.0.len().max(1)) as f64).powf(decode.length_penalty);
                    pa.partial_cmp(&pb).unwrap()
                })
                .unwrap();
            Ok(best.0)
        }
    }
}

/// A trained model bundled with its tokenizer; the inference surface
/// used by the CLI and the multi-document driver.
pub struct Summarizer<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ModelParams<S>,
    pub table: MergeTable,
    pub vocab: Vocab,
    pub tau: f64,
}

impl<S: Scalar> Summarizer<S> {
    /// Infer-mode belief over the document units, calibrated when a
    /// query is supplied.
    pub fn belief(&self, doc: &BpeSequence, query: Option<&BpeSequence>) -> Result<QueryBelief> {
        let mut tape: Tape<S> = Tape::new();
        let vars = self.params.bind(&mut tape);
        let ids: Vec<usize> = doc
            .ids
            .iter()
            .take(self.cfg.max_source_length)
            .map(|&i| self.vocab.map_id(i))
            .collect();
        let (h_q, _d_view) = encode_views(&mut tape, &vars, &self.cfg, &ids)?;
        let pi = latent::score(&mut tape, &vars, h_q)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let (_, belief) = latent::posterior(&mut tape, pi, self.tau, PosteriorMode::Infer, &mut rng)?;
        let clipped = clip_seq(doc, self.cfg.max_source_length);
        Ok(match query {
            Some(q) if !q.is_empty() => calibrate(&belief, &clipped, q),
            _ => belief,
        })
    }

    /// Generates summary unit ids for a document with an optional query.
    pub fn generate(
        &self,
        doc: &BpeSequence,
        query: Option<&BpeSequence>,
        decode: &DecodeConfig,
    ) -> Result<Vec<usize>> {
        if doc.is_empty() {
            return Err(Error::Config("cannot summarize an empty document".into()));
        }
        let belief = self.belief(doc, query)?;
        let mut tape: Tape<S> = Tape::new();
        let vars = self.params.bind(&mut tape);
        let ids: Vec<usize> = doc
            .ids
            .iter()
            .take(self.cfg.max_source_length)
            .map(|&i| self.vocab.map_id(i))
            .collect();
        let (h_q, d_view) = encode_views(&mut tape, &vars, &self.cfg, &ids)?;
        let probs: Vec<S> = belief.probs.iter().map(|&p| S::from_f64(p)).collect();
        let b = tape.constant(Tensor::new(vec![probs.len(), 1], probs)?);
        let q_view = latent::query_focused_view(&mut tape, b, h_q)?;
        let views = DualView {
            q: q_view,
            d: d_view,
        };
        decode_ids(&mut tape, &vars, &self.cfg, &self.vocab, &views, decode)
    }

    /// Generates and detokenizes a summary text.
    pub fn summarize_text(
        &self,
        doc_text: &str,
        query_text: Option<&str>,
        decode: &DecodeConfig,
    ) -> Result<String> {
        let doc = bpe_encode(doc_text, &self.table);
        let query = query_text.map(|q| bpe_encode(q, &self.table));
        let ids = self.generate(&doc, query.as_ref(), decode)?;
        let mut seq = BpeSequence::default();
        let mut word = 0usize;
        for id in ids {
            if id >= self.vocab.bpe_size {
                continue; // sentinel / unk
            }
            let surface = self.table.vocab[id].clone();
            if surface.starts_with(crate::bpe::BOUNDARY) {
                word += 1;
            }
            seq.ids.push(id);
            seq.surfaces.push(surface);
            seq.word_index.push(word.saturating_sub(1));
        }
        bpe_decode(&seq)
    }

    /// Unit surfaces and their (optionally calibrated) beliefs for a
    /// raw text; diagnostic surface for the CLI.
    pub fn belief_for_text(
        &self,
        doc_text: &str,
        query_text: Option<&str>,
    ) -> Result<(Vec<String>, QueryBelief)> {
        let doc = bpe_encode(doc_text, &self.table);
        let clipped = clip_seq(&doc, self.cfg.max_source_length);
        let query = query_text.map(|q| bpe_encode(q, &self.table));
        let belief = self.belief(&doc, query.as_ref())?;
        Ok((clipped.surfaces, belief))
    }
}

pub fn clip_seq(seq: &BpeSequence, max_len: usize) -> BpeSequence {
    if seq.len() <= max_len {
        return seq.clone();
    }
    BpeSequence {
        ids: seq.ids[..max_len].to_vec(),
        surfaces: seq.surfaces[..max_len].to_vec(),
        word_index: seq.word_index[..max_len].to_vec(),
    }
}
