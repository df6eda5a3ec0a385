use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{Gradients, Graph, Tensor, TensorError, TensorResult, Var};

/// How a named tensor participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution and projection weights; these carry the L2 penalty.
    Weight,
    Bias,
    /// BatchNorm scale and shift.
    BnAffine,
    /// Non-trainable state such as BatchNorm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: Arc<Tensor>,
    kind: ParamKind,
}

/// Named parameters and buffers, ordered by name so iteration (and therefore
/// checkpoint layout) is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            Entry {
                value: Arc::new(value),
                kind,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> TensorResult<&Tensor> {
        self.entries
            .get(name)
            .map(|e| e.value.as_ref())
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn shared(&self, name: &str) -> TensorResult<Arc<Tensor>> {
        self.entries
            .get(name)
            .map(|e| e.value.clone())
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Replaces the data of an existing entry, keeping its kind.
    pub fn set(&mut self, name: &str, value: Tensor) -> TensorResult<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.value.as_ref(), e.kind))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Sum of squares over all [`ParamKind::Weight`] entries.
    pub fn weight_sq_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Weight)
            .flat_map(|e| e.value.data().iter())
            .map(|v| v * v)
            .sum()
    }

    /// Copies every entry of `other` whose name starts with `prefix` into `self`.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (k, e) in &other.entries {
            if k.starts_with(prefix) {
                self.entries.insert(k.clone(), e.clone());
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }
}

/// BatchNorm statistics observed during one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One forward pass: a fresh [`Graph`] plus lazily bound parameters.
pub struct Binder<'a> {
    store: &'a ParamStore,
    pub graph: Graph,
    bound: HashMap<String, Var>,
    training: bool,
    grad_params: bool,
    bn_stats: Vec<BnStats>,
}

impl<'a> Binder<'a> {
    /// `training` selects BatchNorm batch statistics; `grad_params` marks
    /// parameters as requiring gradients.
    pub fn new(store: &'a ParamStore, training: bool, grad_params: bool) -> Self {
        Self {
            store,
            graph: Graph::new(),
            bound: HashMap::new(),
            training,
            grad_params,
            bn_stats: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> TensorResult<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let kind = self
            .store
            .kind(name)
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter {name}")))?;
        let v = self
            .graph
            .leaf_shared(self.store.shared(name)?, self.grad_params && kind.trainable())?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// BatchNorm over `x[C×T]` using the `{prefix}.gamma/beta/running_mean/running_var` entries.
    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> TensorResult<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.training {
            let t = self.graph.shape(x)[1];
            let (y, mean, var) = self.graph.batchnorm1d_train(x, gamma, beta)?;
            self.bn_stats.push(BnStats {
                prefix: prefix.to_string(),
                mean,
                var,
                count: t,
            });
            Ok(y)
        } else {
            let rm = self.store.get(&format!("{prefix}.running_mean"))?;
            let rv = self.store.get(&format!("{prefix}.running_var"))?;
            self.graph.batchnorm1d_eval(x, gamma, beta, rm.data(), rv.data())
        }
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStats> {
        std::mem::take(&mut self.bn_stats)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(name, _)| self.store.kind(name).is_some_and(ParamKind::trainable))
            .map(|(name, v)| {
                let len = self.graph.value(*v).len();
                (name.clone(), grads.get_or_zeros(*v, len))
            })
            .collect()
    }
}
