//! The latent query inference network: per-unit scoring, Gumbel-Softmax
//! relaxed posterior, query-focused view, tagging loss with entropy
//! smoothing, posterior dropout, and test-time calibration from an
//! observed query.

use rand::Rng;

use crate::bpe::BpeSequence;
use crate::error::{Error, Result};
use crate::lcs::{lcs_align, WeakLabels};
use crate::params::{ModelParams, ParamVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Clamp applied to probabilities before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefSource {
    Estimated,
    WeakSupervision,
    Calibrated,
}

/// Per-position posterior probability that a document unit belongs to
/// the latent query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBelief {
    pub probs: Vec<f64>,
    pub source: BeliefSource,
}

impl QueryBelief {
    pub fn from_labels(labels: &WeakLabels) -> Self {
        Self {
            probs: labels.labels.iter().map(|&l| l as f64).collect(),
            source: BeliefSource::WeakSupervision,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Belief increments from an observed query; 1.0 exactly at positions on
/// the BPE-LCS of document and query.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDelta {
    pub increments: Vec<f64>,
}

impl CalibrationDelta {
    pub fn from_query(doc: &BpeSequence, query: &BpeSequence) -> Self {
        let aligned = lcs_align(doc, query);
        Self {
            increments: aligned.labels.iter().map(|&l| l as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutGranularity {
    PerExample,
    /// Experimental: replace each position independently.
    PerToken,
}

/// Registers the two-layer MLP scorer: `W_h (d x d), b_h, W_s (d x 2), b_s`.
pub fn init_inference_net<S: Scalar>(
    params: &mut ModelParams<S>,
    d_h: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init_matrix("infer.wh", d_h, d_h, rng)?;
    params.init_zeros("infer.bh", vec![d_h])?;
    params.init_matrix("infer.ws", d_h, 2, rng)?;
    params.init_zeros("infer.bs", vec![2])?;
    Ok(())
}

/// `H_s = relu(H_q W_h + b_h); pi = H_s W_s + b_s`
pub fn score<S: Scalar>(tape: &mut Tape<S>, vars: &ParamVars, h_q: Var) -> Result<Var> {
    let wh = vars.get("infer.wh")?;
    let bh = vars.get("infer.bh")?;
    let ws = vars.get("infer.ws")?;
    let bs = vars.get("infer.bs")?;
    let h = tape.matmul(h_q, wh)?;
    let h = tape.add_bias_row(h, bh)?;
    let h = tape.relu(h);
    let pi = tape.matmul(h, ws)?;
    tape.add_bias_row(pi, bs)
}

fn gumbel<S: Scalar>(rng: &mut impl Rng) -> S {
    let u: f64 = rng.gen_range(1e-12..1.0);
    S::from_f64(-(-u.ln()).ln())
}

/// Gumbel-Softmax relaxed posterior from scores `pi` (`M x 2`).
///
/// Train mode perturbs each class score with i.i.d. Gumbel noise; infer
/// mode uses the noise mode (zero) and is deterministic. Returns the
/// class-1 column as an `M x 1` tape value plus its concrete belief.
pub fn posterior<S: Scalar>(
    tape: &mut Tape<S>,
    pi: Var,
    tau: f64,
    mode: PosteriorMode,
    rng: &mut impl Rng,
) -> Result<(Var, QueryBelief)> {
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "gumbel temperature must be positive, got {tau}"
        )));
    }
    let m = tape.shape(pi)[0];
    let scores = match mode {
        PosteriorMode::Train => {
            let noise: Vec<S> = (0..m * 2).map(|_| gumbel::<S>(rng)).collect();
            let noise = tape.constant(Tensor::new(vec![m, 2], noise)?);
            tape.add(pi, noise)?
        }
        PosteriorMode::Infer => pi,
    };
    let soft = tape.softmax_rows(scores, S::from_f64(tau), None)?;
    let probs = tape.slice_cols(soft, 1, 1)?;
    let belief = QueryBelief {
        probs: tape.data(probs).iter().map(|v| v.to_f64_()).collect(),
        source: BeliefSource::Estimated,
    };
    Ok((probs, belief))
}

/// `Q_i = q(z_i=1|x) * H_{q,i}` — row-wise gating of the query encoding.
pub fn query_focused_view<S: Scalar>(
    tape: &mut Tape<S>,
    belief: Var,
    h_q: Var,
) -> Result<Var> {
    if tape.shape(belief)[0] != tape.shape(h_q)[0] {
        return Err(Error::Invariant(format!(
            "belief length {} does not match encoding rows {}",
            tape.shape(belief)[0],
            tape.shape(h_q)[0]
        )));
    }
    tape.mul_col_broadcast(h_q, belief)
}

/// Tagging cross-entropy with entropy smoothing, summed over positions:
/// `-sum_i [(w*z_i - b*q1) ln q1 + (w*(1-z_i) - b*q0) ln q0]`.
pub fn query_loss<S: Scalar>(
    tape: &mut Tape<S>,
    belief: Var,
    belief_meta: &QueryBelief,
    labels: &WeakLabels,
    omega: f64,
    beta: f64,
) -> Result<Var> {
    if omega < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "query loss weights must be non-negative, got omega={omega} beta={beta}"
        )));
    }
    if belief_meta.source != BeliefSource::Estimated {
        return Err(Error::Invariant(
            "query loss must be computed on the estimated posterior".into(),
        ));
    }
    let m = tape.shape(belief)[0];
    if labels.len() != m {
        return Err(Error::Invariant(format!(
            "label length {} does not match belief length {}",
            labels.len(),
            m
        )));
    }
    let eps = S::from_f64(PROB_EPS);
    let q1 = tape.clamp(belief, eps, S::one() - eps);
    let neg = tape.scale(q1, -S::one());
    let q0 = tape.add_scalar(neg, S::one());
    let l1 = tape.log(q1);
    let l0 = tape.log(q0);

    let zhat: Vec<S> = labels.labels.iter().map(|&z| S::from_f64(z as f64)).collect();
    let zhat_inv: Vec<S> = labels
        .labels
        .iter()
        .map(|&z| S::from_f64(1.0 - z as f64))
        .collect();
    let z1 = tape.constant(Tensor::new(vec![m, 1], zhat)?);
    let z0 = tape.constant(Tensor::new(vec![m, 1], zhat_inv)?);

    let omega_s = S::from_f64(omega);
    let beta_s = S::from_f64(beta);
    let wz1 = tape.scale(z1, omega_s);
    let bq1 = tape.scale(q1, -beta_s);
    let coef1 = tape.add(wz1, bq1)?;
    let wz0 = tape.scale(z0, omega_s);
    let bq0 = tape.scale(q0, -beta_s);
    let coef0 = tape.add(wz0, bq0)?;

    let t1 = tape.mul(coef1, l1)?;
    let t0 = tape.mul(coef0, l0)?;
    let s = tape.add(t1, t0)?;
    let total = tape.sum_all(s);
    Ok(tape.scale(total, -S::one()))
}

/// Loss components for logging: `L_tag = sum_i [z ln q1 + (1-z) ln q0]`
/// and `L_entropy = sum_i [q1 ln q1 + q0 ln q0]`, so the combined loss is
/// `-omega*L_tag + beta*L_entropy`.
pub fn query_loss_components(probs: &[f64], labels: &WeakLabels) -> (f64, f64) {
    let mut l_tag = 0.0;
    let mut l_entropy = 0.0;
    for (&p, &z) in probs.iter().zip(&labels.labels) {
        let q1 = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let q0 = 1.0 - q1;
        l_tag += z as f64 * q1.ln() + (1.0 - z as f64) * q0.ln();
        l_entropy += q1 * q1.ln() + q0 * q0.ln();
    }
    (l_tag, l_entropy)
}

/// With probability `delta`, replaces the estimated posterior with the
/// weak labels (a no-grad constant); otherwise passes it through so
/// gradients keep flowing.
pub fn posterior_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    belief: Var,
    belief_meta: &QueryBelief,
    labels: &WeakLabels,
    delta: f64,
    granularity: DropoutGranularity,
    rng: &mut impl Rng,
) -> Result<(Var, QueryBelief)> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!(
            "posterior dropout rate must be in [0, 1], got {delta}"
        )));
    }
    let m = belief_meta.len();
    if labels.len() != m {
        return Err(Error::Invariant(format!(
            "label length {} does not match belief length {}",
            labels.len(),
            m
        )));
    }
    match granularity {
        DropoutGranularity::PerExample => {
            if rng.gen::<f64>() < delta {
                let hard = QueryBelief::from_labels(labels);
                let data: Vec<S> = hard.probs.iter().map(|&p| S::from_f64(p)).collect();
                let var = tape.constant(Tensor::new(vec![m, 1], data)?);
                Ok((var, hard))
            } else {
                Ok((belief, belief_meta.clone()))
            }
        }
        DropoutGranularity::PerToken => {
            let take_label: Vec<bool> = (0..m).map(|_| rng.gen::<f64>() < delta).collect();
            // out = belief * keep + labels * (1 - keep), selector constant
            let keep: Vec<S> = take_label
                .iter()
                .map(|&t| if t { S::zero() } else { S::one() })
                .collect();
            let lab: Vec<S> = labels
                .labels
                .iter()
                .zip(&take_label)
                .map(|(&l, &t)| if t { S::from_f64(l as f64) } else { S::zero() })
                .collect();
            let keep_v = tape.constant(Tensor::new(vec![m, 1], keep)?);
            let lab_v = tape.constant(Tensor::new(vec![m, 1], lab)?);
            let kept = tape.mul(belief, keep_v)?;
            let out = tape.add(kept, lab_v)?;
            let meta = QueryBelief {
                probs: tape.data(out).iter().map(|v| v.to_f64_()).collect(),
                source: BeliefSource::Estimated,
            };
            Ok((out, meta))
        }
    }
}

/// Linear annealing of the posterior dropout rate.
pub fn anneal_delta(step: usize, total_steps: usize, delta_start: f64, delta_end: f64) -> f64 {
    if total_steps == 0 {
        return delta_end;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    delta_start + (delta_end - delta_start) * t
}

/// Raises belief to 1.0 at positions aligned with the observed query
/// (upper-clamped); the empty query is a no-op.
pub fn calibrate(belief: &QueryBelief, doc: &BpeSequence, query: &BpeSequence) -> QueryBelief {
    if query.is_empty() {
        return belief.clone();
    }
    let delta = CalibrationDelta::from_query(doc, query);
    let probs: Vec<f64> = belief
        .probs
        .iter()
        .zip(&delta.increments)
        .map(|(&p, &d)| (p + d).min(1.0))
        .collect();
    QueryBelief {
        probs,
        source: BeliefSource::Calibrated,
    }
}
