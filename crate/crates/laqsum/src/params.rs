//! Named parameter collections and the checkpoint file format.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named collection of parameter tensors. Names are unique; iteration
/// order is deterministic (sorted by name).
#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ModelParams<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Invariant(format!(
                "duplicate parameter name: {name}"
            )));
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Invariant(format!("unknown parameter: {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Xavier-uniform initialized matrix parameter.
    pub fn init_matrix(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<S> = (0..rows * cols)
            .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        self.insert(name, Tensor::new(vec![rows, cols], data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::new(vec![len], vec![S::one(); len])?)
    }

    /// Places every parameter on the tape as a grad-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> ParamVars {
        let mut map = BTreeMap::new();
        for (name, t) in &self.map {
            let v = tape.leaf(t.clone(), true);
            map.insert(name.clone(), v);
        }
        ParamVars { map }
    }

    /// Collects gradients from a tape after backward.
    pub fn collect_grads(&self, tape: &Tape<S>, vars: &ParamVars) -> BTreeMap<String, Vec<S>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &vars.map {
            if let Some(g) = tape.grad(var) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Tape handles for a bound parameter set.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invariant(format!("unbound parameter: {name}")))
    }
}

/// Full training state persisted to disk: parameters plus optimizer
/// moments and the step counter, so a run can resume exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub step: usize,
    pub params: ModelParams<S>,
    pub opt_m: BTreeMap<String, Vec<S>>,
    pub opt_v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            writeln!(f, "laqsum-ckpt v1 {}", S::TAG)?;
            writeln!(f, "step {}", self.step)?;
            writeln!(f, "section params {}", self.params.len())?;
            for (name, t) in self.params.iter() {
                let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                writeln!(f, "tensor {} {} {}", name, t.shape.len(), dims.join(" "))?;
                write_hex_line(&mut f, &t.data)?;
            }
            for (section, map) in [("opt_m", &self.opt_m), ("opt_v", &self.opt_v)] {
                writeln!(f, "section {} {}", section, map.len())?;
                for (name, data) in map {
                    writeln!(f, "tensor {} 1 {}", name, data.len())?;
                    write_hex_line(&mut f, data)?;
                }
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
                .ok_or_else(|| err("unexpected end of checkpoint".into()))
        };
        let header = next()?;
        let expect = format!("laqsum-ckpt v1 {}", S::TAG);
        if header != expect {
            return Err(err(format!(
                "bad checkpoint header {header:?}, expected {expect:?}"
            )));
        }
        let step_line = next()?;
        let step: usize = step_line
            .strip_prefix("step ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad step line {step_line:?}")))?;

        let mut params = ModelParams::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for section in ["params", "opt_m", "opt_v"] {
            let line = next()?;
            let count: usize = line
                .strip_prefix(&format!("section {section} "))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(format!("bad section line {line:?}")))?;
            for _ in 0..count {
                let head = next()?;
                let mut it = head.split_whitespace();
                let tag = it.next();
                if tag != Some("tensor") {
                    return Err(err(format!("bad tensor line {head:?}")));
                }
                let name = it
                    .next()
                    .ok_or_else(|| err("tensor line missing name".into()))?
                    .to_string();
                let ndim: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("tensor line missing ndim".into()))?;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(
                        it.next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| err("tensor line missing dim".into()))?,
                    );
                }
                let data_line = next()?;
                let data = parse_hex_line::<S>(&data_line)
                    .ok_or_else(|| err(format!("bad values for tensor {name}")))?;
                match section {
                    "params" => params.insert(&name, Tensor::new(shape, data)?)?,
                    "opt_m" => {
                        opt_m.insert(name, data);
                    }
                    _ => {
                        opt_v.insert(name, data);
                    }
                }
            }
        }
        Ok(Self {
            step,
            params,
            opt_m,
            opt_v,
        })
    }
}

fn write_hex_line<S: Scalar, W: Write>(w: &mut W, data: &[S]) -> Result<()> {
    let mut line = String::with_capacity(data.len() * 9);
    for (i, v) in data.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        line.push_str(&v.bits_hex());
    }
    writeln!(w, "{line}")?;
    Ok(())
}

fn parse_hex_line<S: Scalar>(line: &str) -> Option<Vec<S>> {
    line.split_whitespace().map(S::from_bits_hex).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p: ModelParams<f32> = ModelParams::new();
        p.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p: ModelParams<f32> = ModelParams::new();
        p.init_matrix("layer.w", 3, 4, &mut rng).unwrap();
        p.init_zeros("layer.b", vec![1, 4]).unwrap();
        let mut m = BTreeMap::new();
        m.insert("layer.w".to_string(), vec![0.25f32; 12]);
        let ckpt = Checkpoint { step: 41, params: p, opt_m: m, opt_v: BTreeMap::new() };
        let path = dir.path().join("x.ckpt");
        ckpt.save(&path).unwrap();
        let back: Checkpoint<f32> = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 41);
        for (name, t) in ckpt.params.iter() {
            let bt = back.params.get(name).unwrap();
            assert_eq!(bt.shape, t.shape);
            for (a, b) in t.data.iter().zip(&bt.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(back.opt_m["layer.w"], ckpt.opt_m["layer.w"]);
    }

    #[test]
    fn precision_tag_is_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p: ModelParams<f64> = ModelParams::new();
        let ckpt = Checkpoint { step: 1, params: p, opt_m: BTreeMap::new(), opt_v: BTreeMap::new() };
        let path = dir.path().join("x.ckpt");
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::<f32>::load(&path).is_err());
    }

    #[test]
    fn collect_grads_covers_only_touched_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p: ModelParams<f64> = ModelParams::new();
        p.init_matrix("w", 2, 2, &mut rng).unwrap();
        p.init_matrix("unused", 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let w = vars.get("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let grads = p.collect_grads(&tape, &vars);
        assert!(grads.contains_key("w"));
        // untouched parameters may report zero or be absent, never garbage
        if let Some(g) = grads.get("unused") {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }
}
