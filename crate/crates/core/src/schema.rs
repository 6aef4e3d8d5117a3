//! Feature schema: feature definitions, semantic groups, and the scenario
//! and task declarations that drive tokenization.
//!
//! The schema is a JSON file with keys `features[]`, `groups[]`,
//! `scenarios[]`, `tasks[]`. Every feature belongs to exactly one group;
//! one group becomes one feature token. Features flagged `important` feed
//! the shared prior input of every scenario/task token; each scenario and
//! task additionally names its own prior features.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Dense,
    /// Precomputed summary vector standing in for a behavior-sequence module.
    SequenceSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
    /// Vocabulary size; categorical features only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<u64>,
    /// Embedding dim for categorical features, vector dim otherwise.
    pub dim: usize,
    /// Semantic group this feature belongs to.
    pub group: String,
    /// Feeds the shared prior input of scenario and task tokens.
    #[serde(default)]
    pub important: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioDef {
    pub name: String,
    #[serde(default)]
    pub prior_features: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    #[serde(default)]
    pub prior_features: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureDef>,
    pub groups: Vec<String>,
    pub scenarios: Vec<ScenarioDef>,
    pub tasks: Vec<TaskDef>,
}

impl FeatureSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Schema("groups[] must not be empty".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Schema("scenarios[] must not be empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Schema("tasks[] must not be empty".into()));
        }
        let mut seen_groups = std::collections::BTreeSet::new();
        for g in &self.groups {
            if !seen_groups.insert(g.as_str()) {
                return Err(Error::Schema(format!("duplicate group {g}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature {}", f.name)));
            }
            if f.dim == 0 {
                return Err(Error::Schema(format!("feature {} has dim 0", f.name)));
            }
            match f.kind {
                FeatureKind::Categorical => match f.cardinality {
                    Some(c) if c >= 1 => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "categorical feature {} needs cardinality >= 1",
                            f.name
                        )))
                    }
                },
                _ => {
                    if f.cardinality.is_some() {
                        return Err(Error::Schema(format!(
                            "non-categorical feature {} must not set cardinality",
                            f.name
                        )));
                    }
                }
            }
            if !seen_groups.contains(f.group.as_str()) {
                return Err(Error::Schema(format!(
                    "feature {} names unknown group {}",
                    f.name, f.group
                )));
            }
        }
        for g in &self.groups {
            if !self.features.iter().any(|f| &f.group == g) {
                return Err(Error::Schema(format!("group {g} has no features")));
            }
        }
        if self.important_features().next().is_none() {
            return Err(Error::Schema(
                "at least one feature must be flagged important".into(),
            ));
        }
        let mut scen_names = std::collections::BTreeSet::new();
        for s in &self.scenarios {
            if !scen_names.insert(s.name.as_str()) {
                return Err(Error::Schema(format!("duplicate scenario {}", s.name)));
            }
            for p in &s.prior_features {
                if self.feature(p).is_none() {
                    return Err(Error::Schema(format!(
                        "scenario {} prior feature {p} is not declared",
                        s.name
                    )));
                }
            }
        }
        let mut task_names = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !task_names.insert(t.name.as_str()) {
                return Err(Error::Schema(format!("duplicate task {}", t.name)));
            }
            for p in &t.prior_features {
                if self.feature(p).is_none() {
                    return Err(Error::Schema(format!(
                        "task {} prior feature {p} is not declared",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureDef> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Number of semantic groups, i.e. the feature-token count.
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn scenario_count(&self) -> usize {
        self.scenarios.len()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Features of one group, in declaration order.
    pub fn group_features<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a FeatureDef> + 'a {
        self.features.iter().filter(move |f| f.group == group)
    }

    /// Concatenated embedding dim of one group.
    pub fn group_dim(&self, group: &str) -> usize {
        self.group_features(group).map(|f| f.dim).sum()
    }

    pub fn important_features(&self) -> impl Iterator<Item = &FeatureDef> {
        self.features.iter().filter(|f| f.important)
    }

    pub fn important_dim(&self) -> usize {
        self.important_features().map(|f| f.dim).sum()
    }

    /// Prior features of scenario `k`, in declared order.
    pub fn scenario_priors(&self, k: usize) -> Result<Vec<&FeatureDef>> {
        let s = self.scenarios.get(k).ok_or_else(|| {
            Error::Schema(format!("scenario index {k} out of range"))
        })?;
        s.prior_features
            .iter()
            .map(|p| {
                self.feature(p)
                    .ok_or_else(|| Error::MissingFeature(p.clone()))
            })
            .collect()
    }

    pub fn task_priors(&self, n: usize) -> Result<Vec<&FeatureDef>> {
        let t = self
            .tasks
            .get(n)
            .ok_or_else(|| Error::Schema(format!("task index {n} out of range")))?;
        t.prior_features
            .iter()
            .map(|p| {
                self.feature(p)
                    .ok_or_else(|| Error::MissingFeature(p.clone()))
            })
            .collect()
    }

    pub fn scenario_prior_dim(&self, k: usize) -> Result<usize> {
        Ok(self.scenario_priors(k)?.iter().map(|f| f.dim).sum())
    }

    pub fn task_prior_dim(&self, n: usize) -> Result<usize> {
        Ok(self.task_priors(n)?.iter().map(|f| f.dim).sum())
    }

    /// Hex SHA-256 of the canonical JSON serialization. Stored in model
    /// sidecars and manifests; loading a model re-checks it.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
