//! The three token-interaction mechanisms and the stacked block forward.

use crate::data::Instance;
use crate::gradcheck::Graph;
use crate::model::{
    feature_pool_selection, logits_heads, scenario_ffn_prefixes, scenario_q_prefixes, tower_head,
    AttnRecord, ForwardOutput, Membership, Model,
};
use crate::tape::NodeId;
use crate::tokenize::{
    embed_batch, per_token_ffn, tokenize_features, tokenize_scenarios, tokenize_tasks, TokenRole,
    TokenSet,
};
use crate::Result;

/// Parameter-free token mixing: splits each token into `count` segments and
/// regroups segment h of every token into output token h. An involution.
pub fn token_mixing(graph: &mut Graph, t_f: &TokenSet) -> Result<TokenSet> {
    let node = graph.tape.mix_tokens(t_f.node, t_f.count)?;
    Ok(TokenSet { node, ..*t_f })
}

/// Feature self-interaction:
/// `u = LN(mix(T_f) + T_f)`, output `= PertokenFFN(u) + u`,
/// with per-token layer norms and FFNs under `blk<l>.f.*`.
pub fn feature_self_interaction(
    graph: &mut Graph,
    layer: usize,
    t_f: &TokenSet,
    batch: usize,
) -> Result<TokenSet> {
    let mixed = graph.tape.mix_tokens(t_f.node, t_f.count)?;
    let summed = graph.tape.add(mixed, t_f.node)?;
    let mut outs = Vec::with_capacity(t_f.count);
    for j in 0..t_f.count {
        let s = graph.tape.slice_rows(summed, j * batch, batch)?;
        let gain = graph.param(&format!("blk{layer}.f.ln{j}.g"))?;
        let bias = graph.param(&format!("blk{layer}.f.ln{j}.b"))?;
        let u = graph.tape.layer_norm(s, gain, bias)?;
        let v = per_token_ffn(graph, &format!("blk{layer}.f.ffn{j}"), u)?;
        outs.push(graph.tape.add(v, u)?);
    }
    let node = if outs.len() == 1 {
        outs[0]
    } else {
        graph.tape.concat_rows(&outs)?
    };
    Ok(TokenSet { node, ..*t_f })
}

/// Multi-head cross-attention from query tokens onto feature tokens.
///
/// Q projections are per-query-token (`<q_prefix>.{w,b}`), K/V projections
/// per-feature-token (`<prefix>.k<j>` / `<prefix>.v<j>`), heads split the
/// shared dim, and a shared `<prefix>.out` projection merges them. Returns
/// the output (same shape as the queries) and the softmax weight node.
pub fn domain_aware_attention(
    graph: &mut Graph,
    prefix: &str,
    q_prefixes: &[String],
    queries: &TokenSet,
    feats: &TokenSet,
    heads: usize,
    batch: usize,
) -> Result<(NodeId, NodeId)> {
    debug_assert_eq!(q_prefixes.len(), queries.count);
    let mut q_parts = Vec::with_capacity(queries.count);
    for (k, qp) in q_prefixes.iter().enumerate() {
        let tok = graph.tape.slice_rows(queries.node, k * batch, batch)?;
        let w = graph.param(&format!("{qp}.w"))?;
        let b = graph.param(&format!("{qp}.b"))?;
        let p = graph.tape.matmul(tok, w)?;
        q_parts.push(graph.tape.broadcast_add(p, b)?);
    }
    let q = if q_parts.len() == 1 {
        q_parts[0]
    } else {
        graph.tape.concat_rows(&q_parts)?
    };

    let mut k_parts = Vec::with_capacity(feats.count);
    let mut v_parts = Vec::with_capacity(feats.count);
    for j in 0..feats.count {
        let tok = graph.tape.slice_rows(feats.node, j * batch, batch)?;
        let kw = graph.param(&format!("{prefix}.k{j}.w"))?;
        let kb = graph.param(&format!("{prefix}.k{j}.b"))?;
        let kp = graph.tape.matmul(tok, kw)?;
        k_parts.push(graph.tape.broadcast_add(kp, kb)?);
        let vw = graph.param(&format!("{prefix}.v{j}.w"))?;
        let vb = graph.param(&format!("{prefix}.v{j}.b"))?;
        let vp = graph.tape.matmul(tok, vw)?;
        v_parts.push(graph.tape.broadcast_add(vp, vb)?);
    }
    let keys = if k_parts.len() == 1 {
        k_parts[0]
    } else {
        graph.tape.concat_rows(&k_parts)?
    };
    let values = if v_parts.len() == 1 {
        v_parts[0]
    } else {
        graph.tape.concat_rows(&v_parts)?
    };

    let scores = graph.tape.apply(
        crate::tape::Prim::AttnScores {
            heads,
            n_q: queries.count,
            n_k: feats.count,
            batch,
        },
        &[q, keys],
    )?;
    let weights = graph.tape.softmax(scores)?;
    let mixed = graph.tape.apply(
        crate::tape::Prim::AttnMix {
            heads,
            n_q: queries.count,
            n_k: feats.count,
            batch,
        },
        &[weights, values],
    )?;
    let ow = graph.param(&format!("{prefix}.out.w"))?;
    let ob = graph.param(&format!("{prefix}.out.b"))?;
    let o = graph.tape.matmul(mixed, ow)?;
    let out = graph.tape.broadcast_add(o, ob)?;
    Ok((out, weights))
}

/// Per-instance scenario-token row selection for the domain-fused mean:
/// member scenarios plus the global token (last row) when enabled.
pub fn fused_selection(
    memberships: &[Membership],
    n_s: usize,
    include_global: bool,
    batch: usize,
) -> Vec<Vec<usize>> {
    memberships
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rows: Vec<usize> = m.members().map(|k| k * batch + i).collect();
            if include_global {
                rows.push(n_s * batch + i);
            }
            rows
        })
        .collect()
}

/// Domain-fused module: mean-pools each instance's member scenario tokens
/// (plus the global token when present) and adds the pooled vector to every
/// task token of that instance.
pub fn domain_fused(
    graph: &mut Graph,
    t_t_hat: &TokenSet,
    s_hat: NodeId,
    sel: &[Vec<usize>],
) -> Result<TokenSet> {
    let avg = graph.tape.mean_rows(s_hat, sel.to_vec())?;
    let node = graph.tape.broadcast_add(t_t_hat.node, avg)?;
    Ok(TokenSet { node, ..*t_t_hat })
}

/// Token state carried between block layers.
pub struct TokenState {
    pub t_f: TokenSet,
    pub t_s: Option<TokenSet>,
    pub t_t: Option<TokenSet>,
    pub layer: usize,
}

pub(crate) struct BlockOutput {
    pub state: TokenState,
    /// Post-attention, pre-FFN scenario tokens; the domain-fused input.
    pub s_hat: Option<NodeId>,
    pub attention: Vec<AttnRecord>,
}

/// One block layer in the order: feature self-interaction, scenario
/// attention + per-scenario FFN, task attention, domain fusion, per-task
/// FFN. Residual connections wrap the attention and FFN stages; ablation
/// flags skip their stage and leave the rest intact.
pub(crate) fn mdl_block_forward(
    graph: &mut Graph,
    model: &Model,
    state: TokenState,
    sel: &[Vec<usize>],
    batch: usize,
) -> Result<BlockOutput> {
    let cfg = &model.config;
    let l = state.layer;
    let mut attention = Vec::new();

    let t_f_next = feature_self_interaction(graph, l, &state.t_f, batch)?;

    let mut s_hat = None;
    let t_s_next = match &state.t_s {
        None => None,
        Some(t_s) => {
            let hat = if cfg.ablation.no_scenario_feature_attn {
                t_s.node
            } else {
                let q_prefixes = scenario_q_prefixes(cfg, l);
                let (attn, weights) = domain_aware_attention(
                    graph,
                    &format!("blk{l}.sattn"),
                    &q_prefixes,
                    t_s,
                    &t_f_next,
                    cfg.heads,
                    batch,
                )?;
                attention.push(AttnRecord {
                    layer: l,
                    role: TokenRole::Scenario,
                    node: weights,
                    heads: cfg.heads,
                    n_q: t_s.count,
                    n_k: t_f_next.count,
                    batch,
                });
                graph.tape.add(attn, t_s.node)?
            };
            s_hat = Some(hat);
            let ffns = scenario_ffn_prefixes(cfg, l);
            let mut outs = Vec::with_capacity(t_s.count);
            for (k, ffn) in ffns.iter().enumerate() {
                let tok = graph.tape.slice_rows(hat, k * batch, batch)?;
                let y = per_token_ffn(graph, ffn, tok)?;
                outs.push(graph.tape.add(y, tok)?);
            }
            let node = if outs.len() == 1 {
                outs[0]
            } else {
                graph.tape.concat_rows(&outs)?
            };
            Some(TokenSet { node, ..*t_s })
        }
    };

    let t_t_next = match &state.t_t {
        None => None,
        Some(t_t) => {
            let hat = if cfg.ablation.no_task_feature_attn {
                *t_t
            } else {
                let q_prefixes: Vec<String> = (0..cfg.n_t)
                    .map(|n| format!("blk{l}.tattn.q{n}"))
                    .collect();
                let (attn, weights) = domain_aware_attention(
                    graph,
                    &format!("blk{l}.tattn"),
                    &q_prefixes,
                    t_t,
                    &t_f_next,
                    cfg.heads,
                    batch,
                )?;
                attention.push(AttnRecord {
                    layer: l,
                    role: TokenRole::Task,
                    node: weights,
                    heads: cfg.heads,
                    n_q: t_t.count,
                    n_k: t_f_next.count,
                    batch,
                });
                let node = graph.tape.add(attn, t_t.node)?;
                TokenSet { node, ..*t_t }
            };
            let fused = match s_hat {
                Some(sh) => domain_fused(graph, &hat, sh, sel)?,
                None => hat,
            };
            let mut outs = Vec::with_capacity(fused.count);
            for n in 0..fused.count {
                let tok = graph.tape.slice_rows(fused.node, n * batch, batch)?;
                let y = per_token_ffn(graph, &format!("blk{l}.tffn{n}"), tok)?;
                outs.push(graph.tape.add(y, tok)?);
            }
            let node = if outs.len() == 1 {
                outs[0]
            } else {
                graph.tape.concat_rows(&outs)?
            };
            Some(TokenSet { node, ..*t_t })
        }
    };

    Ok(BlockOutput {
        state: TokenState {
            t_f: t_f_next,
            t_s: t_s_next,
            t_t: t_t_next,
            layer: l + 1,
        },
        s_hat,
        attention,
    })
}

/// Full forward pass of the token-interaction architecture.
pub(crate) fn mdl_forward(
    graph: &mut Graph,
    model: &Model,
    batch: &[Instance],
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let b = batch.len();
    let group_embeds = embed_batch(graph, batch, &model.schema)?;
    let t_f = tokenize_features(graph, &group_embeds, &model.schema)?;

    let use_scenarios = !cfg.ablation.no_scenario_token;
    let include_global = !cfg.ablation.no_global_scenario_token;
    let t_s = if use_scenarios {
        Some(tokenize_scenarios(
            graph,
            batch,
            &model.schema,
            include_global,
        )?)
    } else {
        None
    };
    let t_t = if cfg.ablation.no_task_token {
        None
    } else {
        Some(tokenize_tasks(graph, batch, &model.schema)?)
    };

    let sel = if use_scenarios {
        let memberships: Vec<Membership> = batch
            .iter()
            .map(|inst| Membership::from_instance(inst, cfg.n_s))
            .collect::<Result<_>>()?;
        fused_selection(&memberships, cfg.n_s, include_global, b)
    } else {
        Vec::new()
    };

    let mut state = TokenState {
        t_f,
        t_s,
        t_t,
        layer: 0,
    };
    let mut attention = Vec::new();
    let mut s_hat_last = None;
    for _ in 0..cfg.layers {
        let out = mdl_block_forward(graph, model, state, &sel, b)?;
        state = out.state;
        attention.extend(out.attention);
        if out.s_hat.is_some() {
            s_hat_last = out.s_hat;
        }
    }

    let probs = match &state.t_t {
        Some(t_t) => logits_heads(graph, t_t, cfg.n_t, b)?,
        None => {
            // Task towers over pooled feature tokens, with the fused
            // scenario vector added when the scenario path is active.
            let pool_sel = feature_pool_selection(cfg.n_f, b);
            let mut pooled = graph.tape.mean_rows(state.t_f.node, pool_sel)?;
            if let Some(sh) = s_hat_last {
                let avg = graph.tape.mean_rows(sh, sel.clone())?;
                pooled = graph.tape.add(pooled, avg)?;
            }
            let mut cols = Vec::with_capacity(cfg.n_t);
            for n in 0..cfg.n_t {
                cols.push(tower_head(graph, &format!("twr.{n}"), pooled)?);
            }
            if cols.len() == 1 {
                cols[0]
            } else {
                graph.tape.concat(&cols)?
            }
        }
    };

    Ok(ForwardOutput {
        probs,
        attention,
        gates: Vec::new(),
    })
}
