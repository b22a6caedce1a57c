//! Transformer building blocks: multi-head attention, feed-forward,
//! and the residual + layernorm encoder block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::tensor::{Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Registers MHA projection parameters under `prefix`.
pub fn init_mha<S: Scalar>(
    params: &mut ModelParams<S>,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        params.init_matrix(&format!("{prefix}.{w}"), d, d, rng)?;
        params.init_zeros(&format!("{prefix}.b{}", &w[1..]), vec![d])?;
    }
    Ok(())
}

pub fn init_ffn<S: Scalar>(
    params: &mut ModelParams<S>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init_matrix(&format!("{prefix}.w1"), d, d_ff, rng)?;
    params.init_zeros(&format!("{prefix}.b1"), vec![d_ff])?;
    params.init_matrix(&format!("{prefix}.w2"), d_ff, d, rng)?;
    params.init_zeros(&format!("{prefix}.b2"), vec![d])?;
    Ok(())
}

pub fn init_layer_norm<S: Scalar>(params: &mut ModelParams<S>, prefix: &str, d: usize) -> Result<()> {
    params.init_ones(&format!("{prefix}.gain"), d)?;
    params.init_zeros(&format!("{prefix}.bias"), vec![d])?;
    Ok(())
}

/// Scaled dot-product multi-head attention with learned projections.
///
/// `mask`, when given, is a `Tq x Tk` boolean matrix where `true` bars
/// the query position from attending to the key position.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    prefix: &str,
    queries: Var,
    keys: Var,
    values: Var,
    num_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.shape(queries)[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {d} not divisible by {num_heads} heads"
        )));
    }
    let dk = d / num_heads;
    let scale = S::from_f64(1.0 / (dk as f64).sqrt());

    let wq = vars.get(&format!("{prefix}.wq"))?;
    let wk = vars.get(&format!("{prefix}.wk"))?;
    let wv = vars.get(&format!("{prefix}.wv"))?;
    let wo = vars.get(&format!("{prefix}.wo"))?;
    let bq = vars.get(&format!("{prefix}.bq"))?;
    let bk = vars.get(&format!("{prefix}.bk"))?;
    let bv = vars.get(&format!("{prefix}.bv"))?;
    let bo = vars.get(&format!("{prefix}.bo"))?;

    let q = tape.matmul(queries, wq)?;
    let q = tape.add_bias_row(q, bq)?;
    let k = tape.matmul(keys, wk)?;
    let k = tape.add_bias_row(k, bk)?;
    let v = tape.matmul(values, wv)?;
    let v = tape.add_bias_row(v, bv)?;

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, S::one(), mask.map(|m| m.to_vec()))?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, wo)?;
    tape.add_bias_row(out, bo)
}

/// Attention weights of head 0 (diagnostic; recomputed forward-only).
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = true;
        }
    }
    m
}

/// Cross-attention pad mask: `Tq x Tk`, masking padded key positions.
pub fn pad_mask(t_q: usize, key_pad: &[bool]) -> Vec<bool> {
    let t_k = key_pad.len();
    let mut m = vec![false; t_q * t_k];
    for i in 0..t_q {
        for (j, &p) in key_pad.iter().enumerate() {
            m[i * t_k + j] = p;
        }
    }
    m
}

pub fn ffn<S: Scalar>(tape: &mut Tape<S>, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w1 = vars.get(&format!("{prefix}.w1"))?;
    let b1 = vars.get(&format!("{prefix}.b1"))?;
    let w2 = vars.get(&format!("{prefix}.w2"))?;
    let b2 = vars.get(&format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias_row(h, b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_bias_row(out, b2)
}

pub fn layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = vars.get(&format!("{prefix}.gain"))?;
    let bias = vars.get(&format!("{prefix}.bias"))?;
    tape.layer_norm_rows(x, gain, bias, S::from_f64(LN_EPS))
}

/// Registers one full encoder layer (self-attention + FFN) under `prefix`.
pub fn init_encoder_layer<S: Scalar>(
    params: &mut ModelParams<S>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_mha(params, &format!("{prefix}.attn"), d, rng)?;
    init_layer_norm(params, &format!("{prefix}.ln1"), d)?;
    init_ffn(params, &format!("{prefix}.ffn"), d, d_ff, rng)?;
    init_layer_norm(params, &format!("{prefix}.ln2"), d)?;
    Ok(())
}

/// `x = LN(x + MHA(x,x,x)); x = LN(x + FFN(x))`
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    num_heads: usize,
    pad: Option<&[bool]>,
) -> Result<Var> {
    let t = tape.shape(x)[0];
    let mask = pad.map(|p| pad_mask(t, p));
    let attn = multi_head_attention(
        tape,
        vars,
        &format!("{prefix}.attn"),
        x,
        x,
        x,
        num_heads,
        mask.as_deref(),
    )?;
    let x = tape.add(x, attn)?;
    let x = layer_norm(tape, vars, &format!("{prefix}.ln1"), x)?;
    let f = ffn(tape, vars, &format!("{prefix}.ffn"), x)?;
    let x2 = tape.add(x, f)?;
    layer_norm(tape, vars, &format!("{prefix}.ln2"), x2)
}
