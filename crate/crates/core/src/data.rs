//! Synthetic multi-scenario, multi-task dataset generation and I/O.
//!
//! The generator draws latent vectors per user, query, and item, assembles
//! candidates into (user, query) groups of 8-16 items, and labels each
//! instance from a scenario-transformed latent score. Scenario `k` owns a
//! latent transform (a rotation by `scenario_shift[k]` plus an offset of
//! the same magnitude along a per-scenario direction), so both the input
//! distribution and the relevance direction drift apart as the shift
//! grows. Datasets serialize as JSONL, one instance per line.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;
use crate::{Error, Result};

/// Smallest / largest candidate count per (user, query) group.
pub const MIN_GROUP: usize = 8;
pub const MAX_GROUP: usize = 16;

/// Noise scale applied to observed input vectors (labels use
/// [`GenConfig::noise_std`]).
const INPUT_NOISE: f64 = 0.1;

/// One membership pattern and its sampling probability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixEntry {
    pub scenarios: Vec<usize>,
    pub prob: f64,
}

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    /// Scenario count K.
    pub scenarios: usize,
    /// Task count N.
    pub tasks: usize,
    pub users: u64,
    pub queries: u64,
    pub items: u64,
    pub instances: usize,
    /// Distribution over membership patterns (single or overlapping).
    pub scenario_mix: Vec<MixEntry>,
    pub latent_dim: usize,
    /// Per-task score offset; more negative means rarer positives.
    pub task_bias: Vec<f64>,
    /// Per-scenario transform magnitude; 0 means the identity.
    pub scenario_shift: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GenConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios == 0 || self.tasks == 0 || self.latent_dim == 0 {
            return Err(Error::Config("scenarios, tasks, latent_dim must be positive".into()));
        }
        if self.users == 0 || self.queries == 0 {
            return Err(Error::Config("users and queries must be positive".into()));
        }
        if (self.items as usize) < MAX_GROUP {
            return Err(Error::Config(format!(
                "items vocabulary must be at least {MAX_GROUP} to fill a group"
            )));
        }
        if self.instances < MIN_GROUP {
            return Err(Error::Config(format!(
                "instances ({}) is smaller than the minimum group size {MIN_GROUP}",
                self.instances
            )));
        }
        if self.task_bias.len() != self.tasks {
            return Err(Error::Config(format!(
                "task_bias has {} entries for {} tasks",
                self.task_bias.len(),
                self.tasks
            )));
        }
        if self.scenario_shift.len() != self.scenarios {
            return Err(Error::Config(format!(
                "scenario_shift has {} entries for {} scenarios",
                self.scenario_shift.len(),
                self.scenarios
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if self.scenario_mix.is_empty() {
            return Err(Error::Config("scenario_mix must not be empty".into()));
        }
        let mut total = 0.0;
        for entry in &self.scenario_mix {
            if entry.prob < 0.0 {
                return Err(Error::Config("scenario_mix probabilities must be >= 0".into()));
            }
            total += entry.prob;
            if entry.scenarios.is_empty() {
                return Err(Error::Config("scenario_mix pattern must name >= 1 scenario".into()));
            }
            let mut seen = BTreeSet::new();
            for &s in &entry.scenarios {
                if s >= self.scenarios {
                    return Err(Error::Config(format!(
                        "scenario_mix names scenario {s}, but K = {}",
                        self.scenarios
                    )));
                }
                if !seen.insert(s) {
                    return Err(Error::Config("scenario_mix pattern repeats a scenario".into()));
                }
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "scenario_mix probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Desk-scale defaults: 3 scenarios, 3 tasks, tiered positive rates.
    pub fn desk_default(seed: u64) -> Self {
        GenConfig {
            scenarios: 3,
            tasks: 3,
            users: 2000,
            queries: 3000,
            items: 1500,
            instances: 50_000,
            scenario_mix: vec![
                MixEntry { scenarios: vec![0], prob: 0.30 },
                MixEntry { scenarios: vec![1], prob: 0.25 },
                MixEntry { scenarios: vec![2], prob: 0.25 },
                MixEntry { scenarios: vec![0, 1], prob: 0.10 },
                MixEntry { scenarios: vec![1, 2], prob: 0.10 },
            ],
            latent_dim: 8,
            task_bias: vec![-2.2, -5.9, -8.6],
            scenario_shift: vec![0.0, 1.4, 2.8],
            noise_std: 1.0,
            seed,
        }
    }
}

/// One ranked candidate with its context, membership, and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub uid: u64,
    pub qid: u64,
    pub iid: u64,
    /// Dense context vector.
    pub ctx: Vec<f64>,
    /// Per-scenario behavior-summary vectors, K of them.
    pub seq: Vec<Vec<f64>>,
    /// Multi-hot scenario membership, length K, at least one bit set.
    pub member: Vec<u8>,
    /// Per-task binary labels, length N.
    pub labels: Vec<u8>,
}

/// A feature value resolved from an instance by name.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureValue {
    Categorical(u64),
    Vector(Vec<f64>),
}

impl Instance {
    /// QAUC grouping key.
    pub fn group_key(&self) -> (u64, u64) {
        (self.uid, self.qid)
    }

    /// Resolves a schema feature name against this instance.
    ///
    /// Recognized names: `uid`, `qid`, `iid` (categorical), `ctx` and
    /// `member` (dense), and `seq_<k>` (sequence summary of scenario k).
    pub fn feature(&self, name: &str) -> Option<FeatureValue> {
        match name {
            "uid" => Some(FeatureValue::Categorical(self.uid)),
            "qid" => Some(FeatureValue::Categorical(self.qid)),
            "iid" => Some(FeatureValue::Categorical(self.iid)),
            "ctx" => Some(FeatureValue::Vector(self.ctx.clone())),
            "member" => Some(FeatureValue::Vector(
                self.member.iter().map(|&b| b as f64).collect(),
            )),
            _ => {
                let k: usize = name.strip_prefix("seq_")?.parse().ok()?;
                self.seq.get(k).map(|v| FeatureValue::Vector(v.clone()))
            }
        }
    }

    pub fn scenario_members(&self) -> impl Iterator<Item = usize> + '_ {
        self.member
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(k, _)| k)
    }
}

fn normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v = normal_vec(rng, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Rotation by `angle` on the coordinate planes (0,1), (2,3), ... plus an
/// offset of `angle` along `dir`.
fn scenario_transform(u: &[f64], angle: f64, dir: &[f64]) -> Vec<f64> {
    let mut out = u.to_vec();
    let (sin, cos) = angle.sin_cos();
    let mut p = 0;
    while p + 1 < out.len() {
        let (a, b) = (out[p], out[p + 1]);
        out[p] = a * cos - b * sin;
        out[p + 1] = a * sin + b * cos;
        p += 2;
    }
    for (o, d) in out.iter_mut().zip(dir) {
        *o += angle * d;
    }
    out
}

/// Group size that keeps the remaining count either zero or >= MIN_GROUP.
fn next_group_size(remaining: usize, rng: &mut impl Rng) -> usize {
    if remaining <= MAX_GROUP {
        remaining
    } else if remaining < MAX_GROUP + MIN_GROUP {
        remaining - MIN_GROUP
    } else {
        rng.gen_range(MIN_GROUP..=MAX_GROUP.min(remaining - MIN_GROUP))
    }
}

/// Generates a dataset; bitwise deterministic given `config.seed`.
pub fn generate_dataset(config: &GenConfig) -> Result<Vec<Instance>> {
    config.validate()?;
    let k = config.scenarios;
    let n = config.tasks;
    let dim = config.latent_dim;
    let seed = config.seed;

    let mut ent_rng = rng_for(seed, "entities");
    let user_lat: Vec<Vec<f64>> = (0..config.users).map(|_| normal_vec(&mut ent_rng, dim)).collect();
    let query_lat: Vec<Vec<f64>> = (0..config.queries).map(|_| normal_vec(&mut ent_rng, dim)).collect();
    let item_lat: Vec<Vec<f64>> = (0..config.items).map(|_| normal_vec(&mut ent_rng, dim)).collect();

    let mut dir_rng = rng_for(seed, "scenario_dirs");
    let dirs: Vec<Vec<f64>> = (0..k).map(|_| unit_vec(&mut dir_rng, dim)).collect();

    let mut task_rng = rng_for(seed, "task_weights");
    let task_w: Vec<f64> = (0..n).map(|_| task_rng.gen_range(0.8..1.2)).collect();

    let mix_weights: Vec<f64> = config.scenario_mix.iter().map(|e| e.prob).collect();
    let mix_dist = WeightedIndex::new(&mix_weights)
        .map_err(|e| Error::Config(format!("scenario_mix: {e}")))?;

    let mut grp_rng = rng_for(seed, "groups");
    let mut inst_rng = rng_for(seed, "instances");
    let user_dist = Uniform::new(0, config.users);
    let query_dist = Uniform::new(0, config.queries);
    let item_dist = Uniform::new(0, config.items);

    let mut out = Vec::with_capacity(config.instances);
    let mut remaining = config.instances;
    while remaining > 0 {
        let size = next_group_size(remaining, &mut grp_rng);
        remaining -= size;
        let uid = user_dist.sample(&mut grp_rng);
        let qid = query_dist.sample(&mut grp_rng);
        let mut items = BTreeSet::new();
        while items.len() < size {
            items.insert(item_dist.sample(&mut grp_rng));
        }
        let u = &user_lat[uid as usize];
        let q = &query_lat[qid as usize];
        for iid in items {
            let v = &item_lat[iid as usize];
            let pattern = &config.scenario_mix[mix_dist.sample(&mut inst_rng)].scenarios;
            let primary = pattern[inst_rng.gen_range(0..pattern.len())];
            let mut member = vec![0u8; k];
            for &s in pattern {
                member[s] = 1;
            }
            let tu = scenario_transform(u, config.scenario_shift[primary], &dirs[primary]);

            let mut ctx: Vec<f64> = q
                .iter()
                .zip(&dirs[primary])
                .map(|(qc, dc)| qc + config.scenario_shift[primary] * dc)
                .collect();
            for c in &mut ctx {
                *c += INPUT_NOISE * inst_rng.sample::<f64, _>(StandardNormal);
            }
            let seq: Vec<Vec<f64>> = (0..k)
                .map(|s| {
                    let mut t = scenario_transform(u, config.scenario_shift[s], &dirs[s]);
                    for x in &mut t {
                        *x += INPUT_NOISE * inst_rng.sample::<f64, _>(StandardNormal);
                    }
                    t
                })
                .collect();

            let z: f64 = tu.iter().zip(q).zip(v).map(|((t, qc), vc)| (t + qc) * vc).sum();
            let labels: Vec<u8> = (0..n)
                .map(|t| {
                    let noise: f64 = inst_rng.sample(StandardNormal);
                    let s = z * task_w[t] + config.task_bias[t] + config.noise_std * noise;
                    (s > 0.0) as u8
                })
                .collect();

            out.push(Instance {
                uid,
                qid,
                iid,
                ctx,
                seq,
                member,
                labels,
            });
        }
    }
    Ok(out)
}

/// Writes one instance per line as JSON.
pub fn write_dataset<W: Write>(instances: &[Instance], w: &mut W) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut *w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset_file(instances: &[Instance], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(instances, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Reads a JSONL dataset; parse failures report their 1-based line number.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::DatasetLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if inst.member.iter().all(|&b| b == 0) {
            return Err(Error::DatasetLine {
                line: i + 1,
                reason: "membership has no scenario bit set".into(),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<Instance>> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Splits at (user, query) group granularity so no query group straddles
/// the boundary. Deterministic given `seed`.
pub fn split_dataset(
    instances: &[Instance],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!(
            "eval_fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    let mut keys: Vec<(u64, u64)> = Vec::new();
    let mut seen = BTreeSet::new();
    for inst in instances {
        let key = inst.group_key();
        if seen.insert(key) {
            keys.push(key);
        }
    }
    let eval_groups = (eval_fraction * keys.len() as f64).round() as usize;
    if eval_groups == 0 || eval_groups >= keys.len() {
        return Err(Error::Config(format!(
            "eval_fraction {eval_fraction} leaves an empty split ({} groups total)",
            keys.len()
        )));
    }
    // Seeded Fisher-Yates over the group keys.
    let mut rng = rng_for(seed, "split");
    for i in (1..keys.len()).rev() {
        let j = rng.gen_range(0..=i);
        keys.swap(i, j);
    }
    let eval_set: BTreeSet<(u64, u64)> = keys[..eval_groups].iter().copied().collect();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for inst in instances {
        if eval_set.contains(&inst.group_key()) {
            eval.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    Ok((train, eval))
}

/// Distinct (user, query) group count.
pub fn group_count(instances: &[Instance]) -> usize {
    instances
        .iter()
        .map(Instance::group_key)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Per-task fraction of positive labels.
pub fn positive_rates(instances: &[Instance]) -> Vec<f64> {
    if instances.is_empty() {
        return Vec::new();
    }
    let n = instances[0].labels.len();
    let mut counts = vec![0usize; n];
    for inst in instances {
        for (c, &l) in counts.iter_mut().zip(&inst.labels) {
            *c += l as usize;
        }
    }
    counts
        .into_iter()
        .map(|c| c as f64 / instances.len() as f64)
        .collect()
}
