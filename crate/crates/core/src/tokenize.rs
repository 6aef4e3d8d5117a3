//! Unified tokenization: raw instance features become feature tokens,
//! scenario tokens (plus an optional global token), and task tokens, all
//! in one shared latent dimension `d`.
//!
//! Batches are laid out token-major: a token set with `count` tokens over
//! a batch of `B` instances is a `(count * B, d)` matrix in which token
//! `t` of instance `i` sits at row `t * B + i`.

use crate::data::{FeatureValue, Instance};
use crate::gradcheck::Graph;
use crate::schema::{FeatureDef, FeatureKind, FeatureSchema};
use crate::tape::NodeId;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Feature,
    Scenario,
    Task,
}

impl TokenRole {
    pub fn label(self) -> &'static str {
        match self {
            TokenRole::Feature => "feature",
            TokenRole::Scenario => "scenario",
            TokenRole::Task => "task",
        }
    }
}

/// A batched token set: `count` tokens of dim `d` per instance, token-major.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub node: NodeId,
    pub count: usize,
    pub role: TokenRole,
}

/// Embeds one feature for the whole batch as a `(B, dim)` node.
///
/// Categorical features gather rows from the table `<ns>.<name>`; dense and
/// sequence-summary features pass through as given.
pub fn embed_feature(
    graph: &mut Graph,
    batch: &[Instance],
    feature: &FeatureDef,
    table_ns: &str,
) -> Result<NodeId> {
    match feature.kind {
        FeatureKind::Categorical => {
            let cardinality = feature.cardinality.unwrap_or(0);
            let mut idx = Vec::with_capacity(batch.len());
            for inst in batch {
                let value = match inst.feature(&feature.name) {
                    Some(FeatureValue::Categorical(v)) => v,
                    Some(_) => {
                        return Err(Error::BadFeature {
                            feature: feature.name.clone(),
                            reason: "expected a categorical value".into(),
                        })
                    }
                    None => return Err(Error::MissingFeature(feature.name.clone())),
                };
                if value >= cardinality {
                    return Err(Error::CategoricalOutOfRange {
                        feature: feature.name.clone(),
                        value,
                        cardinality,
                    });
                }
                idx.push(value as usize);
            }
            let table = graph.param(&format!("{table_ns}.{}", feature.name))?;
            graph.tape.gather_rows(table, idx)
        }
        FeatureKind::Dense | FeatureKind::SequenceSummary => {
            let mut data = Vec::with_capacity(batch.len() * feature.dim);
            for inst in batch {
                let vec = match inst.feature(&feature.name) {
                    Some(FeatureValue::Vector(v)) => v,
                    Some(_) => {
                        return Err(Error::BadFeature {
                            feature: feature.name.clone(),
                            reason: "expected a vector value".into(),
                        })
                    }
                    None => return Err(Error::MissingFeature(feature.name.clone())),
                };
                if vec.len() != feature.dim {
                    return Err(Error::BadFeature {
                        feature: feature.name.clone(),
                        reason: format!("dim {} != schema dim {}", vec.len(), feature.dim),
                    });
                }
                data.extend_from_slice(&vec);
            }
            Ok(graph.constant(Tensor::new(vec![batch.len(), feature.dim], data)?))
        }
    }
}

/// Per-group concatenated embedding rows, one `(B, group_dim)` node per
/// group in schema group order.
pub fn embed_batch(
    graph: &mut Graph,
    batch: &[Instance],
    schema: &FeatureSchema,
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(schema.groups.len());
    for group in &schema.groups {
        let mut parts = Vec::new();
        for f in schema.group_features(group) {
            parts.push(embed_feature(graph, batch, f, "emb")?);
        }
        let node = if parts.len() == 1 {
            parts[0]
        } else {
            graph.tape.concat(&parts)?
        };
        out.push(node);
    }
    Ok(out)
}

/// Projects each group embedding to dim `d` and stacks the feature tokens
/// token-major. Projection weights live under `proj.<group>.{w,b}`.
pub fn tokenize_features(
    graph: &mut Graph,
    group_embeddings: &[NodeId],
    schema: &FeatureSchema,
) -> Result<TokenSet> {
    let mut tokens = Vec::with_capacity(group_embeddings.len());
    for (g, &e) in schema.groups.iter().zip(group_embeddings) {
        let w = graph.param(&format!("proj.{g}.w"))?;
        let b = graph.param(&format!("proj.{g}.b"))?;
        let p = graph.tape.matmul(e, w)?;
        tokens.push(graph.tape.broadcast_add(p, b)?);
    }
    let node = graph.tape.concat_rows(&tokens)?;
    Ok(TokenSet {
        node,
        count: group_embeddings.len(),
        role: TokenRole::Feature,
    })
}

/// Two affine layers under `<prefix>.{w1,b1,w2,b2}` with a ReLU between.
pub fn per_token_ffn(graph: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w1 = graph.param(&format!("{prefix}.w1"))?;
    let b1 = graph.param(&format!("{prefix}.b1"))?;
    let w2 = graph.param(&format!("{prefix}.w2"))?;
    let b2 = graph.param(&format!("{prefix}.b2"))?;
    let h = graph.tape.matmul(x, w1)?;
    let h = graph.tape.broadcast_add(h, b1)?;
    let h = graph.tape.relu(h)?;
    let y = graph.tape.matmul(h, w2)?;
    graph.tape.broadcast_add(y, b2)
}

/// Shared prior embedding: the concatenation of every `important` feature,
/// drawn from the extra `imp.*` tables for categorical features.
pub fn important_embedding(
    graph: &mut Graph,
    batch: &[Instance],
    schema: &FeatureSchema,
) -> Result<NodeId> {
    let feats: Vec<&FeatureDef> = schema.important_features().collect();
    let mut parts = Vec::with_capacity(feats.len());
    for f in feats {
        parts.push(embed_feature(graph, batch, f, "imp")?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        graph.tape.concat(&parts)
    }
}

fn prior_embedding(
    graph: &mut Graph,
    batch: &[Instance],
    priors: &[&FeatureDef],
) -> Result<Option<NodeId>> {
    if priors.is_empty() {
        return Ok(None);
    }
    let mut parts = Vec::with_capacity(priors.len());
    for f in priors {
        parts.push(embed_feature(graph, batch, f, "imp")?);
    }
    let node = if parts.len() == 1 {
        parts[0]
    } else {
        graph.tape.concat(&parts)?
    };
    Ok(Some(node))
}

/// One token `relu(FFN(imp [+ prior]))` as a `(B, d)` node.
fn prior_token(
    graph: &mut Graph,
    imp: NodeId,
    prior: Option<NodeId>,
    ffn_prefix: &str,
) -> Result<NodeId> {
    let input = match prior {
        Some(p) => graph.tape.concat(&[imp, p])?,
        None => imp,
    };
    let y = per_token_ffn(graph, ffn_prefix, input)?;
    graph.tape.relu(y)
}

/// Scenario tokens: one per configured scenario, from the shared important
/// embedding plus that scenario's prior features, each through its own FFN
/// (`stok.<k>.*`). When `include_global` is set a global token (`stok.global.*`,
/// fed by the important embedding only) is appended as the last token.
pub fn tokenize_scenarios(
    graph: &mut Graph,
    batch: &[Instance],
    schema: &FeatureSchema,
    include_global: bool,
) -> Result<TokenSet> {
    let imp = important_embedding(graph, batch, schema)?;
    let mut tokens = Vec::new();
    for k in 0..schema.scenario_count() {
        let priors = schema.scenario_priors(k)?;
        let prior = prior_embedding(graph, batch, &priors)?;
        tokens.push(prior_token(graph, imp, prior, &format!("stok.{k}"))?);
    }
    if include_global {
        tokens.push(prior_token(graph, imp, None, "stok.global")?);
    }
    let count = tokens.len();
    let node = if count == 1 {
        tokens[0]
    } else {
        graph.tape.concat_rows(&tokens)?
    };
    Ok(TokenSet {
        node,
        count,
        role: TokenRole::Scenario,
    })
}

/// Task tokens, one per configured task, through `ttok.<n>.*`.
pub fn tokenize_tasks(
    graph: &mut Graph,
    batch: &[Instance],
    schema: &FeatureSchema,
) -> Result<TokenSet> {
    let imp = important_embedding(graph, batch, schema)?;
    let mut tokens = Vec::new();
    for n in 0..schema.task_count() {
        let priors = schema.task_priors(n)?;
        let prior = prior_embedding(graph, batch, &priors)?;
        tokens.push(prior_token(graph, imp, prior, &format!("ttok.{n}"))?);
    }
    let count = tokens.len();
    let node = if count == 1 {
        tokens[0]
    } else {
        graph.tape.concat_rows(&tokens)?
    };
    Ok(TokenSet {
        node,
        count,
        role: TokenRole::Task,
    })
}
