//! Model assembly: the token-interaction architecture, its ablation
//! variants, and the shared-bottom / mixture-of-experts baselines.

pub mod baselines;
pub mod blocks;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::gradcheck::Graph;
use crate::params::{InitKind, OptimRule, ParamSpec, ParamStore};
use crate::schema::{FeatureKind, FeatureSchema};
use crate::tape::NodeId;
use crate::tokenize::{self, TokenRole, TokenSet};
use crate::{Error, Result};

/// Architecture selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mdl,
    SharedBottom,
    Mmoe,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdl" => Ok(Arch::Mdl),
            "shared_bottom" => Ok(Arch::SharedBottom),
            "mmoe" => Ok(Arch::Mmoe),
            other => Err(Error::Config(format!(
                "unknown architecture {other}; expected mdl, shared_bottom, or mmoe"
            ))),
        }
    }
}

impl Arch {
    pub fn label(self) -> &'static str {
        match self {
            Arch::Mdl => "mdl",
            Arch::SharedBottom => "shared_bottom",
            Arch::Mmoe => "mmoe",
        }
    }
}

/// Component-removal switches for the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_task_token: bool,
    pub no_task_feature_attn: bool,
    pub no_scenario_token: bool,
    pub no_global_scenario_token: bool,
    pub no_scenario_feature_attn: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.no_task_token
            || self.no_task_feature_attn
            || self.no_scenario_token
            || self.no_global_scenario_token
            || self.no_scenario_feature_attn
    }

    /// Sets one flag by its snake_case name (the CLI `--ablate` values).
    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_task_token" => self.no_task_token = true,
            "no_task_feature_attn" => self.no_task_feature_attn = true,
            "no_scenario_token" => self.no_scenario_token = true,
            "no_global_scenario_token" => self.no_global_scenario_token = true,
            "no_scenario_feature_attn" => self.no_scenario_feature_attn = true,
            other => {
                return Err(Error::Config(format!("unknown ablation flag {other}")));
            }
        }
        Ok(())
    }
}

fn default_heads() -> usize {
    4
}
fn default_ffn_ratio() -> usize {
    2
}
fn default_experts() -> usize {
    4
}
fn default_hidden() -> usize {
    64
}

/// Architecture, dimensions, and ablation flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Feature-token count; must equal the schema's group count.
    pub n_f: usize,
    /// Scenario count; must equal the schema's scenario count.
    pub n_s: usize,
    /// Task count; must equal the schema's task count.
    pub n_t: usize,
    /// Shared token dimension.
    pub d: usize,
    /// Interaction-block layers L.
    pub layers: usize,
    /// Attention heads.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Per-token FFN hidden dim is `ffn_ratio * d`.
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default)]
    pub ablation: AblationFlags,
    /// Expert count (mmoe only).
    #[serde(default = "default_experts")]
    pub experts: usize,
    /// Expert hidden dim (mmoe only).
    #[serde(default = "default_hidden")]
    pub expert_hidden: usize,
    /// Tower hidden dim (baselines and the no_task_token variant).
    #[serde(default = "default_hidden")]
    pub tower_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.n_f != schema.group_count() {
            return Err(Error::Config(format!(
                "n_f = {} but the schema declares {} groups",
                self.n_f,
                schema.group_count()
            )));
        }
        if self.n_s != schema.scenario_count() {
            return Err(Error::Config(format!(
                "n_s = {} but the schema declares {} scenarios",
                self.n_s,
                schema.scenario_count()
            )));
        }
        if self.n_t != schema.task_count() {
            return Err(Error::Config(format!(
                "n_t = {} but the schema declares {} tasks",
                self.n_t,
                schema.task_count()
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.d == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("d, heads, ffn_ratio must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.d % self.n_f != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by the token count n_f = {}; token mixing needs equal segments",
                self.d, self.n_f
            )));
        }
        if self.arch != Arch::Mdl && self.ablation.any() {
            return Err(Error::Config(format!(
                "ablation flags apply to arch mdl only, not {}",
                self.arch.label()
            )));
        }
        if self.arch == Arch::Mmoe && self.experts == 0 {
            return Err(Error::Config("experts must be >= 1".into()));
        }
        if (self.arch != Arch::Mdl || self.ablation.no_task_token) && self.tower_hidden == 0 {
            return Err(Error::Config("tower_hidden must be >= 1".into()));
        }
        if self.arch == Arch::Mmoe && self.expert_hidden == 0 {
            return Err(Error::Config("expert_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// Hidden dim used by every per-token FFN.
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.d
    }

    /// Scenario-token count including the global token when enabled.
    pub fn scenario_token_count(&self) -> usize {
        if self.ablation.no_scenario_token {
            0
        } else if self.ablation.no_global_scenario_token {
            self.n_s
        } else {
            self.n_s + 1
        }
    }
}

/// Optimizer rule by parameter name: embedding tables (`emb.*`, `imp.*`)
/// use Adagrad, everything else RMSProp.
pub fn optimizer_rule_for(name: &str) -> OptimRule {
    if name.starts_with("emb.") || name.starts_with("imp.") {
        OptimRule::Adagrad
    } else {
        OptimRule::Rmsprop
    }
}

/// Per-instance multi-hot scenario membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    bits: Vec<bool>,
}

impl Membership {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Data("membership has no scenario bit set".into()));
        }
        Ok(Membership { bits })
    }

    pub fn from_instance(inst: &Instance, n_s: usize) -> Result<Self> {
        if inst.member.len() != n_s {
            return Err(Error::Data(format!(
                "instance membership has {} bits, model expects {}",
                inst.member.len(),
                n_s
            )));
        }
        Membership::new(inst.member.iter().map(|&b| b != 0).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| k)
    }
}

/// Attention weights exposed by one layer for one query-token role.
#[derive(Clone, Copy, Debug)]
pub struct AttnRecord {
    pub layer: usize,
    pub role: TokenRole,
    /// Softmax node of shape ((batch*heads)*n_q, n_k).
    pub node: NodeId,
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub batch: usize,
}

/// Everything a forward pass exposes.
pub struct ForwardOutput {
    /// Per-task probabilities, shape (batch, n_t).
    pub probs: NodeId,
    pub attention: Vec<AttnRecord>,
    /// Per-task gate softmax nodes (mmoe only), shape (batch, experts).
    pub gates: Vec<NodeId>,
}

/// A built model: config, schema, and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub params: ParamStore,
}

/// Builds a model with freshly initialized parameters.
pub fn build_model(config: &ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<Model> {
    config.validate(schema)?;
    let specs = param_specs(config, schema)?;
    let params = ParamStore::init(&specs, seed)?;
    Ok(Model {
        config: config.clone(),
        schema: schema.clone(),
        params,
    })
}

impl Model {
    /// Number of prediction heads; always `n_t`, independent of `n_s`.
    pub fn logits_head_count(&self) -> usize {
        self.config.n_t
    }

    /// Total parameter values.
    pub fn param_count(&self) -> usize {
        self.params.value_count()
    }

    /// (sparse embedding-table values, dense values).
    pub fn param_counts_by_rule(&self) -> (usize, usize) {
        let mut sparse = 0;
        let mut dense = 0;
        for name in self.params.names() {
            let n = self.params.get(name).expect("name exists").numel();
            match optimizer_rule_for(name) {
                OptimRule::Adagrad => sparse += n,
                OptimRule::Rmsprop => dense += n,
            }
        }
        (sparse, dense)
    }

    /// Forward pass over a batch. Memberships come from the instances.
    pub fn forward(&self, graph: &mut Graph, batch: &[Instance]) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Data("forward pass over an empty batch".into()));
        }
        match self.config.arch {
            Arch::Mdl => blocks::mdl_forward(graph, self, batch),
            Arch::SharedBottom => baselines::shared_bottom_forward(graph, self, batch),
            Arch::Mmoe => baselines::mmoe_forward(graph, self, batch),
        }
    }

    /// Convenience: forward on a fresh graph, returning plain probability
    /// rows (batch x n_t).
    pub fn predict(&self, batch: &[Instance]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new(&self.params);
        let out = self.forward(&mut graph, batch)?;
        let probs = graph.value(out.probs);
        let n_t = self.config.n_t;
        Ok((0..batch.len())
            .map(|i| (0..n_t).map(|n| probs.at2(i, n)).collect())
            .collect())
    }

    /// Writes the parameter archive and its config sidecar.
    pub fn save(&self, archive: &Path, sidecar: &Path) -> Result<()> {
        self.params.save_file(archive)?;
        let sc = ModelSidecar {
            config: self.config.clone(),
            schema_hash: self.schema.hash(),
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&sc)?)?;
        Ok(())
    }

    /// Loads a model and verifies the sidecar's schema hash against the
    /// provided schema.
    pub fn load(archive: &Path, sidecar: &Path, schema: FeatureSchema) -> Result<Model> {
        let sc: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        let hash = schema.hash();
        if sc.schema_hash != hash {
            return Err(Error::Config(format!(
                "schema hash mismatch: archive was trained with {}, provided schema hashes to {}",
                sc.schema_hash, hash
            )));
        }
        sc.config.validate(&schema)?;
        let params = ParamStore::load_file(archive, optimizer_rule_for)?;
        let expected = param_specs(&sc.config, &schema)?;
        for spec in &expected {
            let got = params.get(&spec.name).map_err(|_| {
                Error::Archive(format!("archive is missing parameter {}", spec.name))
            })?;
            if got.shape() != spec.shape.as_slice() {
                return Err(Error::Archive(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    got.shape(),
                    spec.shape
                )));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Archive(format!(
                "archive holds {} parameters, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(Model {
            config: sc.config,
            schema,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    config: ModelConfig,
    schema_hash: String,
}

/// Categorical token-input features that need an extra `imp.*` table under
/// this config: the important set plus every scenario/task prior in use.
fn token_input_features(config: &ModelConfig, schema: &FeatureSchema) -> Result<Vec<String>> {
    let mut names: BTreeSet<String> = BTreeSet::new();
    let mut add = |f: &crate::schema::FeatureDef| {
        if f.kind == FeatureKind::Categorical {
            names.insert(f.name.clone());
        }
    };
    for f in schema.important_features() {
        add(f);
    }
    if !config.ablation.no_scenario_token {
        for k in 0..schema.scenario_count() {
            for f in schema.scenario_priors(k)? {
                add(f);
            }
        }
    }
    if !config.ablation.no_task_token {
        for n in 0..schema.task_count() {
            for f in schema.task_priors(n)? {
                add(f);
            }
        }
    }
    Ok(names.into_iter().collect())
}

fn affine_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    specs.push(ParamSpec::new(
        format!("{prefix}.w"),
        vec![d_in, d_out],
        InitKind::UniformScaled,
        OptimRule::Rmsprop,
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.b"),
        vec![1, d_out],
        InitKind::Zeros,
        OptimRule::Rmsprop,
    ));
}

fn ffn_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, hidden: usize, d_out: usize) {
    specs.push(ParamSpec::new(
        format!("{prefix}.w1"),
        vec![d_in, hidden],
        InitKind::UniformScaled,
        OptimRule::Rmsprop,
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.b1"),
        vec![1, hidden],
        InitKind::Zeros,
        OptimRule::Rmsprop,
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.w2"),
        vec![hidden, d_out],
        InitKind::UniformScaled,
        OptimRule::Rmsprop,
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.b2"),
        vec![1, d_out],
        InitKind::Zeros,
        OptimRule::Rmsprop,
    ));
}

/// Query-projection prefixes for the scenario attention of layer `l`,
/// aligned with the scenario token order (global last when present).
pub(crate) fn scenario_q_prefixes(config: &ModelConfig, l: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..config.n_s)
        .map(|k| format!("blk{l}.sattn.q{k}"))
        .collect();
    if !config.ablation.no_global_scenario_token {
        out.push(format!("blk{l}.sattn.qglobal"));
    }
    out
}

/// Per-token FFN prefixes on the scenario path of layer `l`.
pub(crate) fn scenario_ffn_prefixes(config: &ModelConfig, l: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..config.n_s).map(|k| format!("blk{l}.sffn{k}")).collect();
    if !config.ablation.no_global_scenario_token {
        out.push(format!("blk{l}.sffnglobal"));
    }
    out
}

/// Every parameter name that belongs to scenario `k` ("global" for the
/// global token): its tokenization FFN plus per-layer query projections
/// and per-scenario FFNs. Used by the gradient-isolation checks.
pub fn scenario_param_names(config: &ModelConfig, scenario: Option<usize>) -> Vec<String> {
    let tag = match scenario {
        Some(k) => k.to_string(),
        None => "global".to_string(),
    };
    let mut names = Vec::new();
    for part in ["w1", "b1", "w2", "b2"] {
        names.push(format!("stok.{tag}.{part}"));
    }
    for l in 0..config.layers {
        if !config.ablation.no_scenario_feature_attn {
            names.push(format!("blk{l}.sattn.q{tag}.w"));
            names.push(format!("blk{l}.sattn.q{tag}.b"));
        }
        for part in ["w1", "b1", "w2", "b2"] {
            names.push(format!("blk{l}.sffn{tag}.{part}"));
        }
    }
    names
}

/// Full parameter specification for a config over a schema.
pub fn param_specs(config: &ModelConfig, schema: &FeatureSchema) -> Result<Vec<ParamSpec>> {
    config.validate(schema)?;
    let d = config.d;
    let hidden = config.ffn_hidden();
    let mut specs: Vec<ParamSpec> = Vec::new();

    // Embedding tables for every categorical feature.
    for f in &schema.features {
        if f.kind == FeatureKind::Categorical {
            specs.push(ParamSpec::new(
                format!("emb.{}", f.name),
                vec![f.cardinality.unwrap() as usize, f.dim],
                InitKind::UniformScaled,
                OptimRule::Adagrad,
            ));
        }
    }

    // Per-group feature-token projections.
    for g in &schema.groups {
        affine_specs(&mut specs, &format!("proj.{g}"), schema.group_dim(g), d);
    }

    // Feature self-interaction stack (shared by every architecture).
    for l in 0..config.layers {
        for j in 0..config.n_f {
            specs.push(ParamSpec::new(
                format!("blk{l}.f.ln{j}.g"),
                vec![d],
                InitKind::Ones,
                OptimRule::Rmsprop,
            ));
            specs.push(ParamSpec::new(
                format!("blk{l}.f.ln{j}.b"),
                vec![d],
                InitKind::Zeros,
                OptimRule::Rmsprop,
            ));
            ffn_specs(&mut specs, &format!("blk{l}.f.ffn{j}"), d, hidden, d);
        }
    }

    match config.arch {
        Arch::Mdl => {
            // Extra tables feeding scenario/task token inputs.
            for name in token_input_features(config, schema)? {
                let f = schema.feature(&name).expect("validated");
                specs.push(ParamSpec::new(
                    format!("imp.{name}"),
                    vec![f.cardinality.unwrap() as usize, f.dim],
                    InitKind::UniformScaled,
                    OptimRule::Adagrad,
                ));
            }
            let imp_dim = schema.important_dim();
            if !config.ablation.no_scenario_token {
                for k in 0..config.n_s {
                    let d_in = imp_dim + schema.scenario_prior_dim(k)?;
                    ffn_specs(&mut specs, &format!("stok.{k}"), d_in, hidden, d);
                }
                if !config.ablation.no_global_scenario_token {
                    ffn_specs(&mut specs, "stok.global", imp_dim, hidden, d);
                }
            }
            if !config.ablation.no_task_token {
                for n in 0..config.n_t {
                    let d_in = imp_dim + schema.task_prior_dim(n)?;
                    ffn_specs(&mut specs, &format!("ttok.{n}"), d_in, hidden, d);
                }
            }
            for l in 0..config.layers {
                if !config.ablation.no_scenario_token {
                    if !config.ablation.no_scenario_feature_attn {
                        for q in scenario_q_prefixes(config, l) {
                            affine_specs(&mut specs, &q, d, d);
                        }
                        for j in 0..config.n_f {
                            affine_specs(&mut specs, &format!("blk{l}.sattn.k{j}"), d, d);
                            affine_specs(&mut specs, &format!("blk{l}.sattn.v{j}"), d, d);
                        }
                        affine_specs(&mut specs, &format!("blk{l}.sattn.out"), d, d);
                    }
                    for ffn in scenario_ffn_prefixes(config, l) {
                        ffn_specs(&mut specs, &ffn, d, hidden, d);
                    }
                }
                if !config.ablation.no_task_token {
                    if !config.ablation.no_task_feature_attn {
                        for n in 0..config.n_t {
                            affine_specs(&mut specs, &format!("blk{l}.tattn.q{n}"), d, d);
                        }
                        for j in 0..config.n_f {
                            affine_specs(&mut specs, &format!("blk{l}.tattn.k{j}"), d, d);
                            affine_specs(&mut specs, &format!("blk{l}.tattn.v{j}"), d, d);
                        }
                        affine_specs(&mut specs, &format!("blk{l}.tattn.out"), d, d);
                    }
                    for n in 0..config.n_t {
                        ffn_specs(&mut specs, &format!("blk{l}.tffn{n}"), d, hidden, d);
                    }
                }
            }
            if config.ablation.no_task_token {
                // Pooled feature tokens feed one tower per task instead.
                for n in 0..config.n_t {
                    ffn_specs(&mut specs, &format!("twr.{n}"), d, config.tower_hidden, 1);
                }
            } else {
                for n in 0..config.n_t {
                    affine_specs(&mut specs, &format!("logits.{n}"), d, 1);
                }
            }
        }
        Arch::SharedBottom => {
            for n in 0..config.n_t {
                ffn_specs(&mut specs, &format!("tower.{n}"), d, config.tower_hidden, 1);
            }
        }
        Arch::Mmoe => {
            for e in 0..config.experts {
                ffn_specs(&mut specs, &format!("expert.{e}"), d, config.expert_hidden, d);
            }
            for n in 0..config.n_t {
                affine_specs(&mut specs, &format!("gate.{n}"), d, config.experts);
                ffn_specs(&mut specs, &format!("tower.{n}"), d, config.tower_hidden, 1);
            }
        }
    }
    Ok(specs)
}

/// Per-instance row selections of all feature-token rows (for pooling).
pub(crate) fn feature_pool_selection(n_f: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|i| (0..n_f).map(|j| j * batch + i).collect())
        .collect()
}

/// Per-task probability head over token-major task tokens.
pub(crate) fn logits_heads(
    graph: &mut Graph,
    t_t: &TokenSet,
    n_t: usize,
    batch: usize,
) -> Result<NodeId> {
    let mut cols = Vec::with_capacity(n_t);
    for n in 0..n_t {
        let tok = graph.tape.slice_rows(t_t.node, n * batch, batch)?;
        let w = graph.param(&format!("logits.{n}.w"))?;
        let b = graph.param(&format!("logits.{n}.b"))?;
        let z = graph.tape.matmul(tok, w)?;
        let z = graph.tape.broadcast_add(z, b)?;
        cols.push(graph.tape.sigmoid(z)?);
    }
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        graph.tape.concat(&cols)
    }
}

/// Two-layer tower `<prefix>.{w1,b1,w2,b2}` with ReLU, then sigmoid.
pub(crate) fn tower_head(graph: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
    let z = tokenize::per_token_ffn(graph, prefix, x)?;
    graph.tape.sigmoid(z)
}
