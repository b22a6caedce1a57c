//! Joint optimization of the conditional language model and the latent
//! query model: `L = L_lm + (-omega * L_tag + beta * L_entropy)`, with
//! gradient accumulation, warmup, posterior-dropout annealing, and
//! seeded determinism. All per-step randomness is derived from the seed
//! and the global example counter, so interrupted runs resume exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{encode, train_bpe, BpeSequence, MergeTable};
use crate::data::SummarizationExample;
use crate::error::{Error, Result};
use crate::latent::{
    self, anneal_delta, DropoutGranularity, PosteriorMode, QueryBelief,
};
use crate::lcs::{lcs_align, WeakLabels};
use crate::model::{
    self, clip_seq, DualView, ModelConfig, Summarizer, Vocab,
};
use crate::optim::{adam_step, effective_lr, AdamConfig, AdamState};
use crate::params::{Checkpoint, ModelParams};
use crate::tensor::{Scalar, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Entropy (smoothing) weight.
    pub beta: f64,
    /// Tagging weight.
    pub omega: f64,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub delta_start: f64,
    pub delta_end: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub seed: u64,
    pub num_merges: usize,
    pub checkpoint_interval: usize,
    /// Experimental per-token posterior dropout.
    pub per_token_dropout: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: small model, short schedule.
    pub fn desk() -> Self {
        Self {
            beta: 0.1,
            omega: 10.0,
            tau: 0.9,
            delta_start: 1.0,
            delta_end: 0.5,
            lr: 3e-4,
            warmup_steps: 100,
            total_steps: 3000,
            batch_size: 8,
            accumulation_steps: 1,
            seed: 17,
            num_merges: 220,
            checkpoint_interval: 0,
            per_token_dropout: false,
            model: ModelConfig::default(),
        }
    }

    /// The full-scale configuration, kept as a named preset for
    /// documentation; not intended to run here.
    pub fn paper_scale() -> Self {
        Self {
            beta: 0.1,
            omega: 10.0,
            tau: 0.9,
            delta_start: 1.0,
            delta_end: 0.5,
            lr: 3e-5,
            warmup_steps: 500,
            total_steps: 20_000,
            batch_size: 8,
            accumulation_steps: 32,
            seed: 17,
            num_merges: 32_000,
            checkpoint_interval: 1000,
            per_token_dropout: false,
            model: ModelConfig {
                d_h: 1024,
                num_heads: 16,
                d_ff: 4096,
                n_shared_layers: 11,
                n_decoder_layers: 12,
                max_source_length: 640,
                max_target_length: 140,
                ..ModelConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.omega < 0.0 {
            return Err(Error::Config("beta and omega must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(0.0 <= self.delta_end && self.delta_end <= self.delta_start && self.delta_start <= 1.0)
        {
            return Err(Error::Config(
                "delta schedule must satisfy 0 <= delta_end <= delta_start <= 1".into(),
            ));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config(
                "batch_size and accumulation_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// A training example after tokenization and weak labeling.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub doc: BpeSequence,
    /// Document unit ids mapped into the model vocabulary.
    pub doc_ids: Vec<usize>,
    pub labels: WeakLabels,
    /// Target unit ids (model vocabulary), end-sentinel appended.
    pub target: Vec<usize>,
    /// Ground-truth unit-level mask, when the corpus carries one.
    pub gold_mask: Option<Vec<u8>>,
}

/// Tokenizes, clips, weak-labels, and projects ground-truth masks to
/// unit level for a whole corpus. Embarrassingly parallel per example.
pub fn prepare_corpus(
    examples: &[SummarizationExample],
    table: &MergeTable,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<Vec<PreparedExample>> {
    let prepared: Vec<Result<PreparedExample>> = crate::par::map(examples, |ex| {
        ex.validate_for_training()?;
        let doc_full = encode(&ex.document, table);
        let doc = clip_seq(&doc_full, cfg.max_source_length);
        let summary = encode(ex.summary.as_deref().unwrap_or(""), table);
        let labels = lcs_align(&doc, &summary);
        let doc_ids: Vec<usize> = doc.ids.iter().map(|&i| vocab.map_id(i)).collect();
        let mut target: Vec<usize> = summary
            .ids
            .iter()
            .take(cfg.max_target_length - 1)
            .map(|&i| vocab.map_id(i))
            .collect();
        target.push(vocab.eos());
        let gold_mask = ex.mask.as_ref().map(|word_mask| {
            doc.word_index
                .iter()
                .map(|&wi| word_mask.get(wi).copied().unwrap_or(0))
                .collect()
        });
        Ok(PreparedExample {
            id: ex.id.clone(),
            doc,
            doc_ids,
            labels,
            target,
            gold_mask,
        })
    });
    prepared.into_iter().collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_lm: f64,
    pub l_tag: f64,
    pub l_entropy: f64,
    pub delta: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn csv_header() -> &'static str {
        "step,l_lm,l_tag,l_entropy,delta,lr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_lm, self.l_tag, self.l_entropy, self.delta, self.lr
        )
    }

    /// The combined loss exactly as optimized.
    pub fn total(&self, omega: f64, beta: f64) -> f64 {
        self.l_lm + (-omega * self.l_tag + beta * self.l_entropy)
    }
}

/// Per-example RNG derived from the seed and the global example counter;
/// independent of batching and accumulation grouping.
fn example_rng(seed: u64, example_counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ example_counter.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Forward + backward for one example; gradients are scaled by `scale`
/// and accumulated into `acc`. Returns (l_lm, l_tag, l_entropy).
#[allow(clippy::too_many_arguments)]
fn accumulate_example<S: Scalar>(
    params: &ModelParams<S>,
    ex: &PreparedExample,
    cfg: &TrainConfig,
    vocab: &Vocab,
    delta: f64,
    rng: &mut ChaCha8Rng,
    scale: f64,
    step: usize,
    acc: &mut BTreeMap<String, Vec<S>>,
) -> Result<(f64, f64, f64)> {
    let mut tape: Tape<S> = Tape::new();
    let vars = params.bind(&mut tape);
    let (h_q, d_view) = model::encode_views(&mut tape, &vars, &cfg.model, &ex.doc_ids)?;
    let pi = latent::score(&mut tape, &vars, h_q)?;
    // The tagging objective supervises the deterministic posterior; the
    // Gumbel-noised relaxation below is used only for the reconstruction
    // path, so tagging gradients are not corrupted by sampling noise.
    let (infer_var, infer_belief) =
        latent::posterior(&mut tape, pi, cfg.tau, PosteriorMode::Infer, rng)?;
    let l_query = latent::query_loss(
        &mut tape,
        infer_var,
        &infer_belief,
        &ex.labels,
        cfg.omega,
        cfg.beta,
    )?;
    let (belief_var, belief) =
        latent::posterior(&mut tape, pi, cfg.tau, PosteriorMode::Train, rng)?;

    let granularity = if cfg.per_token_dropout {
        DropoutGranularity::PerToken
    } else {
        DropoutGranularity::PerExample
    };
    let (belief_used, _) = latent::posterior_dropout(
        &mut tape,
        belief_var,
        &belief,
        &ex.labels,
        delta,
        granularity,
        rng,
    )?;
    let q_view = latent::query_focused_view(&mut tape, belief_used, h_q)?;
    let views = DualView {
        q: q_view,
        d: d_view,
    };
    let mut prefix = vec![vocab.bos()];
    prefix.extend(&ex.target[..ex.target.len() - 1]);
    let logits = model::decoder_forward(&mut tape, &vars, &cfg.model, vocab, &prefix, &views, None)?;
    let l_lm = model::lm_loss(&mut tape, logits, &ex.target, vocab)?;

    let lm_val = tape.scalar_value(l_lm).to_f64_();
    let lq_val = tape.scalar_value(l_query).to_f64_();
    if !lm_val.is_finite() {
        return Err(Error::NonFinite {
            what: format!("language-model loss on example {}", ex.id),
            step,
        });
    }
    if !lq_val.is_finite() {
        return Err(Error::NonFinite {
            what: format!("query loss on example {}", ex.id),
            step,
        });
    }

    let total = tape.add(l_lm, l_query)?;
    let total = tape.scale(total, S::from_f64(scale));
    tape.backward(total)?;
    let grads = params.collect_grads(&tape, &vars);
    for (name, g) in grads {
        let slot = acc.entry(name).or_insert_with(|| vec![S::zero(); g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s = *s + v;
        }
    }
    let (l_tag, l_entropy) = latent::query_loss_components(&belief.probs, &ex.labels);
    Ok((lm_val, l_tag, l_entropy))
}

pub struct TrainOutcome<S: Scalar> {
    pub params: ModelParams<S>,
    pub opt_state: AdamState<S>,
    pub metrics: Vec<StepMetrics>,
    pub final_step: usize,
}

/// Runs optimizer steps `start_step+1 ..= end_step` over the prepared
/// corpus. `params`/`opt_state` may come from a checkpoint to resume.
#[allow(clippy::too_many_arguments)]
pub fn train_range<S: Scalar>(
    corpus: &[PreparedExample],
    cfg: &TrainConfig,
    vocab: &Vocab,
    mut params: ModelParams<S>,
    mut opt_state: AdamState<S>,
    start_step: usize,
    end_step: usize,
    mut on_step: impl FnMut(&StepMetrics, &ModelParams<S>, &AdamState<S>) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let adam_cfg = cfg.adam();
    let per_step = cfg.batch_size * cfg.accumulation_steps;
    let n = corpus.len();
    let mut metrics = Vec::new();

    // Deterministic shuffled order per epoch, recomputable at any step.
    let mut epoch_order: Vec<usize> = Vec::new();
    let mut epoch_idx = usize::MAX;
    let order_for = |epoch: usize, cache: &mut Vec<usize>, cached: &mut usize| {
        if *cached != epoch {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            *cache = order;
            *cached = epoch;
        }
    };

    for step in (start_step + 1)..=end_step {
        let delta = anneal_delta(step, cfg.total_steps, cfg.delta_start, cfg.delta_end);
        let mut acc: BTreeMap<String, Vec<S>> = BTreeMap::new();
        let mut sum_lm = 0.0;
        let mut sum_tag = 0.0;
        let mut sum_ent = 0.0;
        let scale = 1.0 / per_step as f64;
        for slot in 0..per_step {
            let counter = ((step - 1) * per_step + slot) as u64;
            let cursor = counter as usize;
            let epoch = cursor / n;
            order_for(epoch, &mut epoch_order, &mut epoch_idx);
            let ex = &corpus[epoch_order[cursor % n]];
            let mut rng = example_rng(cfg.seed, counter);
            let (lm, tag, ent) = accumulate_example(
                &params, ex, cfg, vocab, delta, &mut rng, scale, step, &mut acc,
            )?;
            sum_lm += lm;
            sum_tag += tag;
            sum_ent += ent;
        }
        adam_step(&mut params, &acc, &mut opt_state, step, &adam_cfg)?;
        let m = StepMetrics {
            step,
            l_lm: sum_lm / per_step as f64,
            l_tag: sum_tag / per_step as f64,
            l_entropy: sum_ent / per_step as f64,
            delta,
            lr: effective_lr(&adam_cfg, step),
        };
        on_step(&m, &params, &opt_state)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        params,
        opt_state,
        metrics,
        final_step: end_step,
    })
}

/// One optimizer step on a fresh batch; convenience wrapper used by
/// tests exercising the step contract in isolation.
pub fn train_step<S: Scalar>(
    corpus: &[PreparedExample],
    cfg: &TrainConfig,
    vocab: &Vocab,
    params: ModelParams<S>,
    opt_state: AdamState<S>,
    step: usize,
) -> Result<(StepMetrics, ModelParams<S>, AdamState<S>)> {
    let out = train_range(
        corpus,
        cfg,
        vocab,
        params,
        opt_state,
        step - 1,
        step,
        |_, _, _| Ok(()),
    )?;
    Ok((out.metrics[0], out.params, out.opt_state))
}

/// Full training loop with metrics logging and periodic checkpoints.
pub fn train_loop<S: Scalar>(
    corpus: &[PreparedExample],
    cfg: &TrainConfig,
    vocab: &Vocab,
    out_dir: Option<&Path>,
    mut log: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ModelParams<S> = ModelParams::new();
    model::init_model(&mut params, &cfg.model, vocab, &mut rng)?;

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
            writeln!(f, "{}", StepMetrics::csv_header())?;
            Some(f)
        }
        None => None,
    };

    let interval = cfg.checkpoint_interval;
    let out = train_range(
        corpus,
        cfg,
        vocab,
        params,
        AdamState::new(),
        0,
        cfg.total_steps,
        |m, p, s| {
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", m.csv_row())?;
            }
            log(m);
            if let Some(dir) = out_dir {
                if interval > 0 && m.step % interval == 0 {
                    save_checkpoint(dir, m.step, p, s)?;
                }
            }
            Ok(())
        },
    )?;
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir, out.final_step, &out.params, &out.opt_state)?;
    }
    Ok(out)
}

fn save_checkpoint<S: Scalar>(
    dir: &Path,
    step: usize,
    params: &ModelParams<S>,
    state: &AdamState<S>,
) -> Result<()> {
    let ckpt = Checkpoint {
        step,
        params: params.clone(),
        opt_m: state.m.clone(),
        opt_v: state.v.clone(),
    };
    ckpt.save(&dir.join("model.ckpt"))
}

/// Infer-mode posterior AUC against ground-truth masks, averaged over
/// examples that carry a mask with both classes present.
pub fn mean_posterior_auc<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tau: f64,
    corpus: &[PreparedExample],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in corpus {
        let Some(mask) = &ex.gold_mask else { continue };
        if !mask.contains(&1) || !mask.contains(&0) {
            continue;
        }
        let mut tape: Tape<S> = Tape::new();
        let vars = params.bind(&mut tape);
        let (h_q, _) = model::encode_views(&mut tape, &vars, cfg, &ex.doc_ids)?;
        let pi = latent::score(&mut tape, &vars, h_q)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, belief) = latent::posterior(&mut tape, pi, tau, PosteriorMode::Infer, &mut rng)?;
        sum += crate::rouge::posterior_auc(&belief.probs, mask)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config(
            "no examples with two-class ground-truth masks".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Belief for a raw document under given params (infer mode), used by
/// diagnostics and the CLI.
pub fn infer_belief<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tau: f64,
    vocab: &Vocab,
    doc_ids: &[usize],
) -> Result<QueryBelief> {
    let mapped: Vec<usize> = doc_ids
        .iter()
        .take(cfg.max_source_length)
        .map(|&i| vocab.map_id(i))
        .collect();
    let mut tape: Tape<S> = Tape::new();
    let vars = params.bind(&mut tape);
    let (h_q, _) = model::encode_views(&mut tape, &vars, cfg, &mapped)?;
    let pi = latent::score(&mut tape, &vars, h_q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, belief) = latent::posterior(&mut tape, pi, tau, PosteriorMode::Infer, &mut rng)?;
    Ok(belief)
}

/// Trains a tokenizer over documents and summaries of a corpus.
pub fn train_tokenizer(examples: &[SummarizationExample], num_merges: usize) -> Result<MergeTable> {
    let mut texts: Vec<String> = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        texts.push(ex.document.clone());
        if let Some(s) = &ex.summary {
            texts.push(s.clone());
        }
        if let Some(q) = &ex.query {
            texts.push(q.clone());
        }
    }
    train_bpe(&texts, num_merges)
}

/// Bundles a trained run into a directory loadable by the CLI.
pub fn save_bundle<S: Scalar>(
    dir: &Path,
    cfg: &TrainConfig,
    table: &MergeTable,
    params: &ModelParams<S>,
    state: &AdamState<S>,
    step: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(dir, step, params, state)?;
    table.save(&dir.join("bpe.txt"))?;
    cfg.save(&dir.join("train.toml"))?;
    Ok(())
}

/// Loads a bundle directory back into an inference-ready summarizer.
pub fn load_summarizer<S: Scalar>(dir: &Path) -> Result<Summarizer<S>> {
    let cfg = TrainConfig::load(&dir.join("train.toml"))?;
    let table = MergeTable::load(&dir.join("bpe.txt"))?;
    let ckpt: Checkpoint<S> = Checkpoint::load(&dir.join("model.ckpt"))?;
    let vocab = Vocab {
        bpe_size: table.vocab_size(),
    };
    Ok(Summarizer {
        cfg: cfg.model,
        params: ckpt.params,
        table,
        vocab,
        tau: cfg.tau,
    })
}
