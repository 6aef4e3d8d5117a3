//! Named parameter tensors, optimizer state, and the binary archive format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};

use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Shared denominator epsilon for both optimizer rules.
pub const OPT_EPS: f64 = 1e-8;
/// RMSProp accumulator decay.
pub const RMSPROP_RHO: f64 = 0.9;

/// Per-parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimRule {
    /// Accumulates squared gradients without decay (embedding tables).
    Adagrad,
    /// Exponential moving average of squared gradients (dense parameters).
    Rmsprop,
}

/// Initialization scheme for a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Zeros,
    /// All ones; layer-norm gains.
    Ones,
    /// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    UniformScaled,
}

/// One entry of a parameter-store specification.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub rule: OptimRule,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: InitKind, rule: OptimRule) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
            rule,
        }
    }
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    acc: Tensor,
    rule: OptimRule,
}

/// Named parameter tensors with per-name optimizer accumulators.
///
/// Iteration order is lexicographic by name, which keeps archives and
/// gradient sweeps deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Builds a store from a specification; draws are derived from
    /// (seed, name) so the result is independent of entry order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            if spec.shape.is_empty() || spec.shape.iter().any(|&d| d == 0) {
                return Err(Error::Config(format!(
                    "parameter {} has invalid shape {:?}",
                    spec.name, spec.shape
                )));
            }
            let numel: usize = spec.shape.iter().product();
            let data = match spec.init {
                InitKind::Zeros => vec![0.0; numel],
                InitKind::Ones => vec![1.0; numel],
                InitKind::UniformScaled => {
                    let (fan_in, fan_out) = match spec.shape.len() {
                        1 => (spec.shape[0], spec.shape[0]),
                        _ => (spec.shape[0], spec.shape[1..].iter().product()),
                    };
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new(-a, a);
                    let mut r = rng_for(seed, &spec.name);
                    (0..numel).map(|_| dist.sample(&mut r)).collect()
                }
            };
            let value = Tensor::new(spec.shape.clone(), data)?;
            store.insert(&spec.name, value, spec.rule)?;
        }
        Ok(store)
    }

    /// Inserts a tensor under a fresh name with a zeroed accumulator.
    pub fn insert(&mut self, name: &str, value: Tensor, rule: OptimRule) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let acc = Tensor::zeros(value.shape().to_vec());
        self.params.insert(
            name.to_string(),
            Param { value, acc, rule },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn rule(&self, name: &str) -> Result<OptimRule> {
        self.params
            .get(name)
            .map(|p| p.rule)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn accumulator(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.acc)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of parameter values (excluding optimizer state).
    pub fn value_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Overwrites one entry of a parameter; used by finite differencing.
    pub fn set_entry(&mut self, name: &str, idx: usize, v: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        p.value.data_mut()[idx] = v;
        Ok(())
    }

    /// Applies one optimizer step.
    ///
    /// Every gradient name must exist in the store with a matching shape;
    /// parameters without a gradient entry are untouched. Adagrad-tagged
    /// parameters accumulate squared gradients; RMSProp-tagged parameters
    /// decay the accumulator by rho = 0.9. Both divide by
    /// sqrt(accumulator) + 1e-8.
    pub fn optimizer_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    prim: "optimizer_step",
                    lhs: g.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            let acc = p.acc.data_mut();
            let pv = p.value.data_mut();
            match p.rule {
                OptimRule::Adagrad => {
                    for ((a, w), &gv) in acc.iter_mut().zip(pv.iter_mut()).zip(g.data()) {
                        *a += gv * gv;
                        *w -= lr * gv / (a.sqrt() + OPT_EPS);
                    }
                }
                OptimRule::Rmsprop => {
                    for ((a, w), &gv) in acc.iter_mut().zip(pv.iter_mut()).zip(g.data()) {
                        *a = RMSPROP_RHO * *a + (1.0 - RMSPROP_RHO) * gv * gv;
                        *w -= lr * gv / (a.sqrt() + OPT_EPS);
                    }
                }
            }
        }
        Ok(())
    }

    // ---- archive I/O ----
    //
    // Layout: magic "MDL1", u64-LE tensor count, then per tensor:
    // u32-LE name length, UTF-8 name, u32-LE rank, u64-LE dims,
    // row-major f64-LE values. Optimizer accumulators are stored under
    // "<name>.acc" after their parameter.

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"MDL1")?;
        let count = (self.params.len() * 2) as u64;
        w.write_all(&count.to_le_bytes())?;
        for (name, p) in &self.params {
            write_tensor(w, name, &p.value)?;
            write_tensor(w, &format!("{name}.acc"), &p.acc)?;
        }
        Ok(())
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads an archive; `rule_for` re-derives the optimizer tag per name.
    pub fn load<R: Read>(r: &mut R, rule_for: impl Fn(&str) -> OptimRule) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Archive("truncated header".into()))?;
        if &magic != b"MDL1" {
            return Err(Error::Archive(format!(
                "bad magic {:?}, expected \"MDL1\"",
                magic
            )));
        }
        let count = read_u64(r)?;
        let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut accs: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let (name, tensor) = read_tensor(r)?;
            match name.strip_suffix(".acc") {
                Some(base) => {
                    accs.insert(base.to_string(), tensor);
                }
                None => {
                    values.insert(name, tensor);
                }
            }
        }
        let mut store = ParamStore::new();
        for (name, value) in values {
            let acc = match accs.remove(&name) {
                Some(a) => {
                    if a.shape() != value.shape() {
                        return Err(Error::Archive(format!(
                            "accumulator shape mismatch for {name}"
                        )));
                    }
                    a
                }
                None => Tensor::zeros(value.shape().to_vec()),
            };
            let rule = rule_for(&name);
            store.params.insert(name, Param { value, acc, rule });
        }
        if !accs.is_empty() {
            let orphan = accs.keys().next().unwrap();
            return Err(Error::Archive(format!(
                "accumulator {orphan}.acc has no parameter"
            )));
        }
        Ok(store)
    }

    pub fn load_file(path: &Path, rule_for: impl Fn(&str) -> OptimRule) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f, rule_for)
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Archive("truncated u64".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Archive("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 20 {
        return Err(Error::Archive(format!("implausible name length {name_len}")));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)
        .map_err(|_| Error::Archive("truncated name".into()))?;
    let name = String::from_utf8(name_buf).map_err(|_| Error::Archive("name not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Archive(format!("implausible rank {rank} for {name}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 30 {
        return Err(Error::Archive(format!("implausible size for {name}")));
    }
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Archive(format!("truncated values for {name}")))?;
        data.push(f64::from_le_bytes(buf));
    }
    let tensor =
        Tensor::new(shape, data).map_err(|_| Error::Archive(format!("bad shape for {name}")))?;
    Ok((name, tensor))
}
