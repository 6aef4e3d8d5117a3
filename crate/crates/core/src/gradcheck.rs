//! Graph construction over a parameter store, and gradient checking by
//! central finite differences.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A tape plus the parameter leaves bound onto it.
///
/// Model forwards pull named parameters in through [`Graph::param`]; after
/// [`Graph::backward`] the gradients come back keyed by those names, ready
/// for the optimizer. Parameters never bound during a forward simply have
/// no gradient entry.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, NodeId>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    /// Leaf node for a named parameter, inserted on first use.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = self.tape.leaf(value);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Leaf node for an input tensor (no gradient is collected for it).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.tape.leaf(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Runs backward from a scalar loss and returns gradients for every
    /// parameter bound on this graph, keyed by name.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.tape.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, &id) in &self.bound {
            named.insert(name.clone(), grads.take(id));
        }
        Ok(named)
    }
}

/// Relative-error floor used by [`finite_diff_check`].
const REL_FLOOR: f64 = 1e-8;

/// Checks reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `build` must construct the loss deterministically from whatever
/// parameters it pulls off the graph. Returns the maximum over all
/// parameter entries of `|ad - fd| / max(1e-8, |ad| + |fd|)`.
pub fn finite_diff_check<F>(build: F, params: &ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut graph = Graph::new(store);
        let loss = build(&mut graph)?;
        let value = graph.value(loss);
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        let v = value.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_check objective".into(),
                value: v,
            });
        }
        Ok(v)
    };

    // Reverse-mode gradients at the base point.
    let mut graph = Graph::new(params);
    let loss = build(&mut graph)?;
    let value = graph.value(loss);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: value.shape().to_vec(),
        });
    }
    if !value.data()[0].is_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check objective".into(),
            value: value.data()[0],
        });
    }
    let ad_grads = graph.backward(loss)?;
    drop(graph);

    let mut scratch = params.clone();
    let mut max_rel = 0.0_f64;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let base = params.get(name)?.clone();
        let ad = ad_grads.get(name);
        for i in 0..base.numel() {
            let x = base.data()[i];
            scratch.set_entry(name, i, x + epsilon)?;
            let fp = eval(&scratch)?;
            scratch.set_entry(name, i, x - epsilon)?;
            let fm = eval(&scratch)?;
            scratch.set_entry(name, i, x)?;
            let fd = (fp - fm) / (2.0 * epsilon);
            let ad_v = ad.map(|t| t.data()[i]).unwrap_or(0.0);
            let rel = (ad_v - fd).abs() / REL_FLOOR.max(ad_v.abs() + fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
