//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; every operation records enough state to
//! propagate exact gradients backwards. Precision is a type parameter:
//! gradient-check suites instantiate `f64`, training uses `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, ToPrimitive};

use crate::error::{Error, Result};

/// Element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const TAG: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    /// Bit-exact textual form used by the checkpoint format.
    fn bits_hex(self) -> String;
    fn from_bits_hex(s: &str) -> Option<Self>;
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn bits_hex(self) -> String {
        format!("{:08x}", self.to_bits())
    }
    fn from_bits_hex(s: &str) -> Option<Self> {
        u32::from_str_radix(s, 16).ok().map(f32::from_bits)
    }
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn bits_hex(self) -> String {
        format!("{:016x}", self.to_bits())
    }
    fn from_bits_hex(s: &str) -> Option<Self> {
        u64::from_str_radix(s, 16).ok().map(f64::from_bits)
    }
}

/// A plain dense tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Invariant(format!(
                "tensor shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBiasRow(Var, Var),
    Mul(Var, Var),
    MulColBroadcast(Var, Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, S, S),
    Scale(Var, S),
    AddScalar(Var),
    // Masked positions have zero output, so the gradient vanishes
    // there without storing the mask.
    SoftmaxRows {
        x: Var,
        temp: S,
    },
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(S, S)>, // (mean, rstd) per row
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    SumAll(Var),
    SoftmaxXentRows {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<S>, needs_grad: bool) -> Var {
        self.push(t.shape, t.data, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
        }
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape[0]
    }

    fn cols(&self, v: Var) -> usize {
        let s = &self.nodes[v.0].shape;
        if s.len() >= 2 {
            s[1]
        } else {
            1
        }
    }

    fn is_2d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.is_2d(a, "matmul")?;
        let (k2, n) = self.is_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            matmul_into(ad, bd, &mut out, m, k, n);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.is_2d(a, "transpose")?;
        let ad = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add(a, b), ng))
    }

    /// `a` is `m x n`, `bias` is a length-`n` row broadcast over all rows.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.is_2d(a, "add_bias_row")?;
        if self.nodes[bias.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        let bd = &self.nodes[bias.0].data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + bd[j];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(vec![m, n], out, Op::AddBiasRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Mul(a, b), ng))
    }

    /// Scales row `i` of `mat` (`m x n`) by `col[i]` (`m x 1`).
    pub fn mul_col_broadcast(&mut self, mat: Var, col: Var) -> Result<Var> {
        let (m, n) = self.is_2d(mat, "mul_col_broadcast")?;
        if self.rows(col) != m || self.cols(col) != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: self.shape(mat).to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let mut out = self.nodes[mat.0].data.clone();
        let cd = &self.nodes[col.0].data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] * cd[i];
            }
        }
        let ng = self.needs(mat) || self.needs(col);
        Ok(self.push(vec![m, n], out, Op::MulColBroadcast(mat, col), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Relu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Log(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::AddScalar(a), ng)
    }

    /// Row-wise softmax of `x / temp`. Positions where `mask` is true are
    /// excluded (treated as negative infinity). `mask`, when given, has one
    /// entry per element of `x`.
    pub fn softmax_rows(&mut self, x: Var, temp: S, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.is_2d(x, "softmax_rows")?;
        if temp <= S::zero() {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {}",
                temp
            )));
        }
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: vec![m, n],
                    rhs: vec![mk.len()],
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let masked = |j: usize| mask.as_ref().map_or(false, |mk| mk[i * n + j]);
            let mut maxv = S::neg_infinity();
            for j in 0..n {
                if !masked(j) && row[j] > maxv {
                    maxv = row[j];
                }
            }
            if maxv == S::neg_infinity() {
                // fully masked row: leave zeros
                continue;
            }
            let mut denom = S::zero();
            for j in 0..n {
                if !masked(j) {
                    let e = ((row[j] - maxv) / temp).exp();
                    out[i * n + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / denom;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows { x, temp }, ng))
    }

    /// Layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (m, n) = self.is_2d(x, "layer_norm_rows")?;
        if self.nodes[gain.0].data.len() != n || self.nodes[bias.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: vec![m, n],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let bd = &self.nodes[bias.0].data;
        let nf = S::from_f64(n as f64);
        let mut out = vec![S::zero(); m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / nf;
            let rstd = S::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                out[i * n + j] = gd[j] * xhat + bd[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                stats,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` (`V x d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.is_2d(table, "embedding")?;
        for &id in ids {
            if id >= v {
                return Err(Error::Invariant(format!(
                    "embedding id {} out of range for table with {} rows",
                    id, v
                )));
            }
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols requires at least one input".into()));
        }
        let m = self.rows(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.is_2d(p, "concat_cols")?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pn;
        }
        let mut out = vec![S::zero(); m * total];
        let mut off = 0;
        for &p in parts {
            let pn = self.cols(p);
            let pd = &self.nodes[p.0].data;
            for i in 0..m {
                out[i * total + off..i * total + off + pn]
                    .copy_from_slice(&pd[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.is_2d(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start, len }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().copied().sum::<S>();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum_all(a);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, restricted to rows where `keep` is true.
    pub fn softmax_xent_rows(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let (m, n) = self.is_2d(logits, "softmax_xent_rows")?;
        if targets.len() != m || keep.len() != m {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent_rows",
                lhs: vec![m, n],
                rhs: vec![targets.len(), keep.len()],
            });
        }
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![S::zero(); m * n];
        let mut loss = S::zero();
        let mut count = 0usize;
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let maxv = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..n {
                let e = (row[j] - maxv).exp();
                probs[i * n + j] = e;
                denom = denom + e;
            }
            for j in 0..n {
                probs[i * n + j] = probs[i * n + j] / denom;
            }
            if keep[i] {
                if targets[i] >= n {
                    return Err(Error::Invariant(format!(
                        "target id {} out of range for {} classes",
                        targets[i], n
                    )));
                }
                let p = probs[i * n + targets[i]].max(S::from_f64(1e-30));
                loss = loss - p.ln();
                count += 1;
            }
        }
        if count > 0 {
            loss = loss / S::from_f64(count as f64);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXentRows {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                probs,
            },
            ng,
        ))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- backward ----

    fn add_grad(&mut self, v: Var, delta: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let g = self.nodes[v.0].grad.get_or_insert_with(|| vec![S::zero(); n]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi = *gi + d;
        }
    }

    /// Backpropagates from `loss` (a scalar) through the whole tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Invariant(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let g = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[S]) -> Result<()> {
        // Ops are moved out temporarily so we can mutate grads of inputs.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if self.needs(*a) {
                    // da = g @ b^T
                    let mut da = vec![S::zero(); m * k];
                    let bd = &self.nodes[b.0].data;
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != S::zero() {
                                for p in 0..k {
                                    da[i * k + p] = da[i * k + p] + gij * bd[p * n + j];
                                }
                            }
                        }
                    }
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    // db = a^T @ g
                    let mut db = vec![S::zero(); k * n];
                    let ad = &self.nodes[a.0].data;
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip != S::zero() {
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                                }
                            }
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::AddBiasRow(a, bias) => {
                self.add_grad(*a, g);
                if self.needs(*bias) {
                    let (m, n) = (self.rows(*a), self.cols(*a));
                    let mut db = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                    self.add_grad(*bias, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<S> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::MulColBroadcast(mat, col) => {
                let (m, n) = (self.rows(*mat), self.cols(*mat));
                if self.needs(*mat) {
                    let cd = &self.nodes[col.0].data;
                    let mut dm = vec![S::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dm[i * n + j] = g[i * n + j] * cd[i];
                        }
                    }
                    self.add_grad(*mat, &dm);
                }
                if self.needs(*col) {
                    let md = &self.nodes[mat.0].data;
                    let mut dc = vec![S::zero(); m];
                    for i in 0..m {
                        for j in 0..n {
                            dc[i] = dc[i] + g[i * n + j] * md[i * n + j];
                        }
                    }
                    self.add_grad(*col, &dc);
                }
            }
            Op::Relu(a) => {
                let da: Vec<S> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gi, &x)| if x > S::zero() { gi } else { S::zero() })
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Log(a) => {
                let da: Vec<S> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gi, &x)| gi / x)
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let da: Vec<S> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gi, &x)| if x > lo && x < hi { gi } else { S::zero() })
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Scale(a, c) => {
                let c = *c;
                let da: Vec<S> = g.iter().map(|&gi| gi * c).collect();
                self.add_grad(*a, &da);
            }
            Op::AddScalar(a) => {
                self.add_grad(*a, g);
            }
            Op::SoftmaxRows { x, temp } => {
                let (m, n) = (self.rows(*x), self.cols(*x));
                let y = &self.nodes[idx].data;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot = dot + g[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = (g[i * n + j] - dot) * y[i * n + j] / *temp;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                stats,
            } => {
                let (m, n) = (self.rows(*x), self.cols(*x));
                let nf = S::from_f64(n as f64);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gain.0].data.clone();
                let mut dx = vec![S::zero(); m * n];
                let mut dgain = vec![S::zero(); n];
                let mut dbias = vec![S::zero(); n];
                for i in 0..m {
                    let (mean, rstd) = stats[i];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    let mut xhat = vec![S::zero(); n];
                    let mut dxhat = vec![S::zero(); n];
                    for j in 0..n {
                        xhat[j] = (xd[i * n + j] - mean) * rstd;
                        dxhat[j] = g[i * n + j] * gd[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                        dgain[j] = dgain[j] + g[i * n + j] * xhat[j];
                        dbias[j] = dbias[j] + g[i * n + j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = rstd
                            * (dxhat[j] - sum_dxhat / nf - xhat[j] * sum_dxhat_xhat / nf);
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*gain, &dgain);
                self.add_grad(*bias, &dbias);
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.cols(*table);
                    let v = self.rows(*table);
                    let mut dt = vec![S::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                        }
                    }
                    self.add_grad(*table, &dt);
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.rows(parts[0]);
                let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
                let mut off = 0;
                for &p in parts {
                    let pn = self.cols(p);
                    if self.needs(p) {
                        let mut dp = vec![S::zero(); m * pn];
                        for i in 0..m {
                            dp[i * pn..(i + 1) * pn]
                                .copy_from_slice(&g[i * total + off..i * total + off + pn]);
                        }
                        self.add_grad(p, &dp);
                    }
                    off += pn;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = (self.rows(*x), self.cols(*x));
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add_grad(*x, &dx);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].data.len();
                let da = vec![g[0]; n];
                self.add_grad(*a, &da);
            }
            Op::SoftmaxXentRows {
                logits,
                targets,
                keep,
                probs,
            } => {
                let (m, n) = (self.rows(*logits), self.cols(*logits));
                let count = keep.iter().filter(|&&k| k).count().max(1);
                let inv = S::from_f64(1.0 / count as f64);
                let mut dl = vec![S::zero(); m * n];
                for i in 0..m {
                    if !keep[i] {
                        continue;
                    }
                    for j in 0..n {
                        let indicator = if j == targets[i] { S::one() } else { S::zero() };
                        dl[i * n + j] = g[0] * (probs[i * n + j] - indicator) * inv;
                    }
                }
                self.add_grad(*logits, &dl);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    // ikj order keeps the inner loop contiguous over b and out.
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}
