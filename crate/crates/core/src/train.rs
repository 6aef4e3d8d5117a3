//! Multi-task loss, the training loop, and evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::gradcheck::Graph;
use crate::metrics::{auc, qauc};
use crate::model::{optimizer_rule_for, Model};
use crate::params::OptimRule;
use crate::rng::rng_for;
use crate::tape::NodeId;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probability clamp bounds inside the cross-entropy.
pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    2
}
fn default_lr_dense() -> f64 {
    1e-3
}
fn default_lr_sparse() -> f64 {
    5e-2
}

/// Training hyperparameters. The desk-scale batch default is 256.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_dense")]
    pub lr_dense: f64,
    #[serde(default = "default_lr_sparse")]
    pub lr_sparse: f64,
    /// Evaluate every this many steps; 0 means only after the last step.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Per-task loss weights; empty means uniform 1.0.
    #[serde(default)]
    pub task_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_dense: default_lr_dense(),
            lr_sparse: default_lr_sparse(),
            eval_every: 0,
            seed: 0,
            task_weights: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_t: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr_dense < 0.0 || self.lr_sparse < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !self.task_weights.is_empty() {
            if self.task_weights.len() != n_t {
                return Err(Error::Config(format!(
                    "task_weights has {} entries for {} tasks",
                    self.task_weights.len(),
                    n_t
                )));
            }
            if self.task_weights.iter().any(|&w| w < 0.0) {
                return Err(Error::Config("task_weights must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self, n_t: usize) -> Vec<f64> {
        if self.task_weights.is_empty() {
            vec![1.0; n_t]
        } else {
            self.task_weights.clone()
        }
    }
}

/// Labels of a batch as a (B, N) tensor of 0/1 values.
pub fn label_matrix(batch: &[Instance], n_t: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.len() * n_t);
    for inst in batch {
        if inst.labels.len() != n_t {
            return Err(Error::Data(format!(
                "instance has {} labels, model expects {n_t}",
                inst.labels.len()
            )));
        }
        data.extend(inst.labels.iter().map(|&l| l as f64));
    }
    Tensor::new(vec![batch.len(), n_t], data)
}

/// Weighted multi-task cross-entropy of probability rows against 0/1
/// labels: mean over instances of sum over tasks of
/// `w_n * BCE(y_n, clamp(p_n))`.
pub fn multi_task_loss(probs: &Tensor, labels: &Tensor, weights: &[f64]) -> Result<f64> {
    if probs.shape() != labels.shape() || probs.rank() != 2 || probs.shape()[1] != weights.len() {
        return Err(Error::ShapeMismatch {
            prim: "multi_task_loss",
            lhs: probs.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let (b, n) = (probs.shape()[0], probs.shape()[1]);
    let mut total = 0.0;
    for i in 0..b {
        for t in 0..n {
            let p = probs.at2(i, t).clamp(PROB_CLAMP_LO, PROB_CLAMP_HI);
            let y = labels.at2(i, t);
            total -= weights[t] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
    }
    Ok(total / b as f64)
}

/// Tape-recorded version of [`multi_task_loss`]; identical arithmetic,
/// differentiable through the probability node.
pub fn multi_task_loss_node(
    graph: &mut Graph,
    probs: NodeId,
    labels: &Tensor,
    weights: &[f64],
) -> Result<NodeId> {
    let shape = graph.value(probs).shape().to_vec();
    if shape != labels.shape() || shape.len() != 2 || shape[1] != weights.len() {
        return Err(Error::ShapeMismatch {
            prim: "multi_task_loss",
            lhs: shape,
            rhs: labels.shape().to_vec(),
        });
    }
    let (b, n) = (shape[0], shape[1]);
    let y = graph.constant(labels.clone());
    let one_minus_y = graph.constant(Tensor::new(
        vec![b, n],
        labels.data().iter().map(|&v| 1.0 - v).collect(),
    )?);
    let mut wdata = Vec::with_capacity(b * n);
    for _ in 0..b {
        wdata.extend_from_slice(weights);
    }
    let w = graph.constant(Tensor::new(vec![b, n], wdata)?);

    let p = graph.tape.clamp(probs, PROB_CLAMP_LO, PROB_CLAMP_HI)?;
    let log_p = graph.tape.log(p)?;
    let neg_p = graph.tape.scalar_mul(p, -1.0)?;
    let one_minus_p = graph.tape.add_scalar(neg_p, 1.0)?;
    let log_1mp = graph.tape.log(one_minus_p)?;
    let pos = graph.tape.mul(y, log_p)?;
    let neg = graph.tape.mul(one_minus_y, log_1mp)?;
    let ll = graph.tape.add(pos, neg)?;
    let weighted = graph.tape.mul(ll, w)?;
    let total = graph.tape.sum(weighted)?;
    graph.tape.scalar_mul(total, -1.0 / b as f64)
}

/// QAUC of one (scenario, task) pair on an evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PairQauc {
    pub scenario: String,
    pub task: String,
    pub value: f64,
    pub valid_groups: usize,
    pub skipped_groups: usize,
}

/// Overall per-task metric (None when the eval set is single-class).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskMetric {
    pub task: String,
    pub auc: Option<f64>,
    pub qauc: Option<f64>,
}

/// Evaluation summary for one model on one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per (scenario, task) QAUC, scenario-major order.
    pub pairs: Vec<PairQauc>,
    /// Overall per-task AUC and QAUC.
    pub tasks: Vec<TaskMetric>,
    pub param_count: usize,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Mean over all (scenario, task) pairs.
    pub fn mean_pair_qauc(&self) -> f64 {
        if self.pairs.is_empty() {
            return f64::NAN;
        }
        self.pairs.iter().map(|p| p.value).sum::<f64>() / self.pairs.len() as f64
    }

    /// Mean over tasks of the overall QAUC.
    pub fn mean_task_qauc(&self) -> f64 {
        let vals: Vec<f64> = self.tasks.iter().filter_map(|t| t.qauc).collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Scores every instance; `threads > 1` splits the data into contiguous
/// spans evaluated on worker threads (per-instance outputs are independent
/// of batch composition, so the result is identical to the serial path).
pub fn predict_all(
    model: &Model,
    data: &[Instance],
    batch_size: usize,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let chunked = |span: &[Instance]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(span.len());
        for chunk in span.chunks(batch_size.max(1)) {
            out.extend(model.predict(chunk)?);
        }
        Ok(out)
    };
    if threads <= 1 || data.len() < 2 * batch_size {
        return chunked(data);
    }
    let span_len = data.len().div_ceil(threads);
    let spans: Vec<&[Instance]> = data.chunks(span_len).collect();
    let results: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = spans
            .into_iter()
            .map(|span| scope.spawn(move || chunked(span)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Per (scenario, task) QAUC plus overall per-task metrics.
pub fn eval_metrics(
    model: &Model,
    data: &[Instance],
    batch_size: usize,
    threads: usize,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let scores = predict_all(model, data, batch_size, threads)?;
    let n_t = model.config.n_t;
    let keys: Vec<(u64, u64)> = data.iter().map(Instance::group_key).collect();

    let mut pairs = Vec::new();
    for (k, scen) in model.schema.scenarios.iter().enumerate() {
        let idx: Vec<usize> = data
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.member.get(k).copied().unwrap_or(0) != 0)
            .map(|(i, _)| i)
            .collect();
        for (t, task) in model.schema.tasks.iter().enumerate() {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i][t]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| data[i].labels[t]).collect();
            let g: Vec<(u64, u64)> = idx.iter().map(|&i| keys[i]).collect();
            let q = qauc(&s, &l, &g)?;
            pairs.push(PairQauc {
                scenario: scen.name.clone(),
                task: task.name.clone(),
                value: q.value,
                valid_groups: q.valid_groups,
                skipped_groups: q.skipped_groups,
            });
        }
    }

    let mut tasks = Vec::new();
    for (t, task) in model.schema.tasks.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|row| row[t]).collect();
        let l: Vec<u8> = data.iter().map(|inst| inst.labels[t]).collect();
        let a = auc(&s, &l);
        let q = qauc(&s, &l, &keys).ok().map(|q| q.value);
        tasks.push(TaskMetric {
            task: task.name.clone(),
            auc: a,
            qauc: q,
        });
    }

    Ok(MetricsReport {
        pairs,
        tasks,
        param_count: model.param_count(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// One history row: training step, batch loss, per-pair QAUC on the eval set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub loss: f64,
    pub pairs: Vec<PairQauc>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub points: Vec<HistoryPoint>,
    /// (step, batch loss) for every step.
    pub losses: Vec<(usize, f64)>,
}

impl TrainHistory {
    /// CSV with columns `step,loss,qauc_<scenario>_<task>...`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::from("step,loss");
        if let Some(first) = self.points.first() {
            for p in &first.pairs {
                header.push_str(&format!(",qauc_{}_{}", p.scenario, p.task));
            }
        }
        writeln!(w, "{header}")?;
        for point in &self.points {
            let mut row = format!("{},{}", point.step, point.loss);
            for p in &point.pairs {
                row.push_str(&format!(",{}", p.value));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Trains a model in place: seeded shuffling, mini-batches, reverse-mode
/// gradients, Adagrad on embedding tables at `lr_sparse` and RMSProp on
/// dense parameters at `lr_dense`. Evaluates on `eval_data` every
/// `eval_every` steps and always after the last step.
pub fn train(
    model: &mut Model,
    train_data: &[Instance],
    eval_data: &[Instance],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let n_t = model.config.n_t;
    config.validate(n_t)?;
    if train_data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let weights = config.weights(n_t);
    let mut history = TrainHistory::default();
    let mut step = 0usize;
    let total_steps = config.epochs * train_data.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut rng = rng_for(config.seed, &format!("shuffle.epoch{epoch}"));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let shuffled: Vec<Instance> = order.iter().map(|&i| train_data[i].clone()).collect();

        for batch in shuffled.chunks(config.batch_size) {
            let labels = label_matrix(batch, n_t)?;
            let mut graph = Graph::new(&model.params);
            let fwd = model.forward(&mut graph, batch)?;
            let loss_node = multi_task_loss_node(&mut graph, fwd.probs, &labels, &weights)?;
            let loss = graph.value(loss_node).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { batch: step, value: loss });
            }
            let grads = graph.backward(loss_node)?;
            drop(graph);

            let mut sparse = BTreeMap::new();
            let mut dense = BTreeMap::new();
            for (name, g) in grads {
                match optimizer_rule_for(&name) {
                    OptimRule::Adagrad => sparse.insert(name, g),
                    OptimRule::Rmsprop => dense.insert(name, g),
                };
            }
            model.params.optimizer_step(&sparse, config.lr_sparse)?;
            model.params.optimizer_step(&dense, config.lr_dense)?;

            step += 1;
            history.losses.push((step, loss));
            let due = config.eval_every != 0 && step % config.eval_every == 0;
            if (due || step == total_steps) && !eval_data.is_empty() {
                let report = eval_metrics(model, eval_data, config.batch_size, 1)?;
                history.points.push(HistoryPoint {
                    step,
                    loss,
                    pairs: report.pairs,
                });
            }
        }
    }
    Ok(history)
}
