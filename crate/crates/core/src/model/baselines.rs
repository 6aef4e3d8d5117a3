//! Shared-bottom and mixture-of-experts baselines over the same feature
//! tokenization and self-interaction stack.

use crate::data::Instance;
use crate::gradcheck::Graph;
use crate::model::{feature_pool_selection, tower_head, ForwardOutput, Model};
use crate::tape::NodeId;
use crate::tensor::Tensor;
use crate::tokenize::{embed_batch, tokenize_features};
use crate::Result;

/// Feature tokens through L self-interaction layers, mean-pooled per
/// instance to a (B, d) representation.
fn shared_stack(graph: &mut Graph, model: &Model, batch: &[Instance]) -> Result<NodeId> {
    let b = batch.len();
    let group_embeds = embed_batch(graph, batch, &model.schema)?;
    let mut t_f = tokenize_features(graph, &group_embeds, &model.schema)?;
    for l in 0..model.config.layers {
        t_f = super::blocks::feature_self_interaction(graph, l, &t_f, b)?;
    }
    let sel = feature_pool_selection(model.config.n_f, b);
    graph.tape.mean_rows(t_f.node, sel)
}

/// Shared bottom: pooled shared representation, one two-layer tower per
/// task. Scenario information reaches it only through input features.
pub(crate) fn shared_bottom_forward(
    graph: &mut Graph,
    model: &Model,
    batch: &[Instance],
) -> Result<ForwardOutput> {
    let pooled = shared_stack(graph, model, batch)?;
    let n_t = model.config.n_t;
    let mut cols = Vec::with_capacity(n_t);
    for n in 0..n_t {
        cols.push(tower_head(graph, &format!("tower.{n}"), pooled)?);
    }
    let probs = if cols.len() == 1 {
        cols[0]
    } else {
        graph.tape.concat(&cols)?
    };
    Ok(ForwardOutput {
        probs,
        attention: Vec::new(),
        gates: Vec::new(),
    })
}

/// Multi-gate mixture of experts: expert FFNs over the pooled vector, one
/// softmax gate per task, then per-task towers over the gated mixture.
pub(crate) fn mmoe_forward(
    graph: &mut Graph,
    model: &Model,
    batch: &[Instance],
) -> Result<ForwardOutput> {
    let pooled = shared_stack(graph, model, batch)?;
    let cfg = &model.config;
    let experts = cfg.experts;

    let mut expert_outs = Vec::with_capacity(experts);
    for e in 0..experts {
        expert_outs.push(crate::tokenize::per_token_ffn(
            graph,
            &format!("expert.{e}"),
            pooled,
        )?);
    }

    let mut cols = Vec::with_capacity(cfg.n_t);
    let mut gates = Vec::with_capacity(cfg.n_t);
    for n in 0..cfg.n_t {
        let gw = graph.param(&format!("gate.{n}.w"))?;
        let gb = graph.param(&format!("gate.{n}.b"))?;
        let gl = graph.tape.matmul(pooled, gw)?;
        let gl = graph.tape.broadcast_add(gl, gb)?;
        let gate = graph.tape.softmax(gl)?;
        gates.push(gate);

        let mut mixture: Option<NodeId> = None;
        for (e, &exp) in expert_outs.iter().enumerate() {
            // Column e of the gate as a (B, 1) node, via a constant selector.
            let mut sel_data = vec![0.0; experts];
            sel_data[e] = 1.0;
            let selector = graph.constant(Tensor::new(vec![experts, 1], sel_data)?);
            let col = graph.tape.matmul(gate, selector)?;
            let scaled = graph.tape.scale_rows(exp, col)?;
            mixture = Some(match mixture {
                Some(acc) => graph.tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        let mix = mixture.expect("experts >= 1");
        cols.push(tower_head(graph, &format!("tower.{n}"), mix)?);
    }
    let probs = if cols.len() == 1 {
        cols[0]
    } else {
        graph.tape.concat(&cols)?
    };
    Ok(ForwardOutput {
        probs,
        attention: Vec::new(),
        gates,
    })
}
