//! Analysis tooling: attention-distribution extraction, analytic FLOPs,
//! the scaling sweep, and parameter-budget matching for fair baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::gradcheck::Graph;
use crate::model::{build_model, param_specs, Arch, Model, ModelConfig};
use crate::schema::FeatureSchema;
use crate::tokenize::TokenRole;
use crate::train::{eval_metrics, train, TrainConfig};
use crate::{Error, Result};

/// One batch- and head-averaged attention weight.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttnRow {
    pub layer: usize,
    /// "scenario" or "task".
    pub token_role: String,
    pub token_index: usize,
    pub feature_index: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionReport {
    pub rows: Vec<AttnRow>,
}

impl AttentionReport {
    /// The weight distribution over feature tokens for one query token.
    pub fn distribution(&self, layer: usize, role: &str, token: usize) -> Vec<f64> {
        let mut rows: Vec<&AttnRow> = self
            .rows
            .iter()
            .filter(|r| r.layer == layer && r.token_role == role && r.token_index == token)
            .collect();
        rows.sort_by_key(|r| r.feature_index);
        rows.iter().map(|r| r.weight).collect()
    }

    /// CSV with columns `layer,token_role,token_index,feature_index,weight`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "layer,token_role,token_index,feature_index,weight")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.layer, r.token_role, r.token_index, r.feature_index, r.weight
            )?;
        }
        Ok(())
    }
}

/// Runs a forward pass and averages each layer's attention weights over the
/// batch and heads, per (query token, feature token).
pub fn dump_attention(model: &Model, batch: &[Instance]) -> Result<AttentionReport> {
    if model.config.arch != Arch::Mdl {
        return Err(Error::Config(format!(
            "attention dump requires arch mdl, got {}",
            model.config.arch.label()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Data("attention dump over an empty batch".into()));
    }
    let mut graph = Graph::new(&model.params);
    let fwd = model.forward(&mut graph, batch)?;
    let mut report = AttentionReport::default();
    for rec in &fwd.attention {
        let w = graph.value(rec.node);
        let norm = 1.0 / (rec.batch * rec.heads) as f64;
        for a in 0..rec.n_q {
            for t in 0..rec.n_k {
                let mut acc = 0.0;
                for i in 0..rec.batch {
                    for h in 0..rec.heads {
                        acc += w.at2((i * rec.heads + h) * rec.n_q + a, t);
                    }
                }
                report.rows.push(AttnRow {
                    layer: rec.layer,
                    token_role: match rec.role {
                        TokenRole::Scenario => "scenario".to_string(),
                        TokenRole::Task => "task".to_string(),
                        TokenRole::Feature => "feature".to_string(),
                    },
                    token_index: a,
                    feature_index: t,
                    weight: acc * norm,
                });
            }
        }
    }
    Ok(report)
}

/// Analytic multiply-add count of one forward instance.
///
/// Counts matrix-multiply and attention inner products (m*k*n per matmul);
/// elementwise ops, layer norms, and softmaxes are excluded.
pub fn flops_per_instance(config: &ModelConfig, schema: &FeatureSchema) -> Result<u64> {
    config.validate(schema)?;
    let d = config.d as u64;
    let h = config.ffn_hidden() as u64;
    let n_f = config.n_f as u64;
    let n_t = config.n_t as u64;
    let th = config.tower_hidden as u64;

    let mut total: u64 = 0;
    for g in &schema.groups {
        total += schema.group_dim(g) as u64 * d;
    }
    // Feature self-interaction per layer: per-token FFN d -> h -> d.
    total += config.layers as u64 * n_f * (d * h + h * d);

    match config.arch {
        Arch::Mdl => {
            let imp = schema.important_dim() as u64;
            if !config.ablation.no_scenario_token {
                for k in 0..config.n_s {
                    let din = imp + schema.scenario_prior_dim(k)? as u64;
                    total += din * h + h * d;
                }
                if !config.ablation.no_global_scenario_token {
                    total += imp * h + h * d;
                }
            }
            if !config.ablation.no_task_token {
                for n in 0..config.n_t {
                    let din = imp + schema.task_prior_dim(n)? as u64;
                    total += din * h + h * d;
                }
            }
            let n_qs = config.scenario_token_count() as u64;
            for _ in 0..config.layers {
                if n_qs > 0 {
                    if !config.ablation.no_scenario_feature_attn {
                        total += n_qs * d * d; // Q projections
                        total += 2 * n_f * d * d; // K and V projections
                        total += 2 * n_qs * n_f * d; // scores + weighted mix
                        total += n_qs * d * d; // output projection
                    }
                    total += n_qs * (d * h + h * d); // per-scenario FFN
                }
                if !config.ablation.no_task_token {
                    if !config.ablation.no_task_feature_attn {
                        total += n_t * d * d;
                        total += 2 * n_f * d * d;
                        total += 2 * n_t * n_f * d;
                        total += n_t * d * d;
                    }
                    total += n_t * (d * h + h * d);
                }
            }
            if config.ablation.no_task_token {
                total += n_t * (d * th + th);
            } else {
                total += n_t * d; // logits heads
            }
        }
        Arch::SharedBottom => {
            total += n_t * (d * th + th);
        }
        Arch::Mmoe => {
            let e = config.experts as u64;
            let eh = config.expert_hidden as u64;
            total += e * (d * eh + eh * d);
            total += n_t * d * e; // gates
            total += n_t * (d * th + th);
        }
    }
    Ok(total)
}

/// Total parameter-value count of a config without building it.
pub fn param_count_for(config: &ModelConfig, schema: &FeatureSchema) -> Result<usize> {
    Ok(param_specs(config, schema)?
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}

/// Adjusts a baseline config's hidden widths so its total parameter count
/// lands as close as possible to `target`. Shared-bottom scans the tower
/// width; mmoe scans a shared expert/tower width.
pub fn match_param_budget(
    config: &ModelConfig,
    schema: &FeatureSchema,
    target: usize,
) -> Result<ModelConfig> {
    if config.arch == Arch::Mdl {
        return Err(Error::Config(
            "match_param_budget sizes baselines, not the mdl architecture".into(),
        ));
    }
    let mut best: Option<(usize, ModelConfig)> = None;
    for hidden in 1..=8192usize {
        let mut candidate = config.clone();
        candidate.tower_hidden = hidden;
        if candidate.arch == Arch::Mmoe {
            candidate.expert_hidden = hidden;
        }
        let count = param_count_for(&candidate, schema)?;
        let gap = count.abs_diff(target);
        match &best {
            Some((best_gap, _)) if *best_gap <= gap => {
                if count > target {
                    break; // counts grow monotonically in hidden
                }
            }
            _ => best = Some((gap, candidate)),
        }
    }
    Ok(best.expect("scan is nonempty").1)
}

/// One sweep measurement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub layers: usize,
    pub seed: u64,
    pub params: usize,
    pub flops: u64,
    /// Overall QAUC per task.
    pub task_qauc: Vec<(String, f64)>,
    pub qauc_mean: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV with columns `d,layers,seed,params,flops,qauc_<task>...,qauc_mean`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::from("d,layers,seed,params,flops");
        if let Some(first) = self.rows.first() {
            for (task, _) in &first.task_qauc {
                header.push_str(&format!(",qauc_{task}"));
            }
        }
        header.push_str(",qauc_mean");
        writeln!(w, "{header}")?;
        for r in &self.rows {
            let mut row = format!("{},{},{},{},{}", r.d, r.layers, r.seed, r.params, r.flops);
            for (_, v) in &r.task_qauc {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(",{}", r.qauc_mean));
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Mean of `qauc_mean` over the rows of one (d, layers) grid point.
    pub fn mean_for(&self, d: usize, layers: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.d == d && r.layers == layers)
            .map(|r| r.qauc_mean)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Trains every grid config on the same data with the same seeds and
/// reports parameter counts, analytic FLOPs, and per-task QAUC. One row
/// per (config, seed).
pub fn scaling_sweep(
    grid: &[ModelConfig],
    schema: &FeatureSchema,
    train_data: &[Instance],
    eval_data: &[Instance],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid must not be empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut report = SweepReport::default();
    for config in grid {
        let flops = flops_per_instance(config, schema)?;
        for &seed in seeds {
            let mut model = build_model(config, schema, seed)?;
            let mut cfg = train_cfg.clone();
            cfg.seed = seed;
            train(&mut model, train_data, eval_data, &cfg)?;
            let metrics = eval_metrics(&model, eval_data, cfg.batch_size, 1)?;
            let task_qauc: Vec<(String, f64)> = metrics
                .tasks
                .iter()
                .map(|t| (t.task.clone(), t.qauc.unwrap_or(f64::NAN)))
                .collect();
            let qauc_mean = metrics.mean_task_qauc();
            report.rows.push(SweepRow {
                d: config.d,
                layers: config.layers,
                seed,
                params: model.param_count(),
                flops,
                task_qauc,
                qauc_mean,
            });
        }
    }
    Ok(report)
}
