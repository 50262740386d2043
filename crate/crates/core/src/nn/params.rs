use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// State updated outside the gradient path (batch-norm running stats).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
    /// Whether weight decay applies (conv kernels and class weights only).
    pub decay: bool,
}

/// Named, ordered collection of every tensor a model owns.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            kind,
            frozen: false,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.kind == ParamKind::Weight && !p.frozen
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(id, _)| id)
            .collect()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    /// Returns how many were affected.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].frozen = true;
        }
    }

    /// SHA-256 over names and exact bit patterns of every parameter whose
    /// name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fold batch statistics into running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.params[u.running_mean.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.mean)
            {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.params[u.running_var.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var)
            {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }
}

/// Pending running-statistics update produced by a training forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward/backward evaluation over a read-only [`ParamStore`].
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: HashMap<ParamId, Var>,
    training: bool,
    updates: Vec<StatUpdate>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            training,
            updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Graph leaf for a parameter; bound once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let rg = self.training && self.store.is_trainable(id);
        let v = self.graph.leaf(self.store.value(id).clone(), rg);
        self.bound.insert(id, v);
        v
    }

    pub(crate) fn push_update(&mut self, u: StatUpdate) {
        self.updates.push(u);
    }

    /// Gradients for every bound trainable parameter, in id order.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        let mut ids: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        ids.sort();
        for (p, v) in ids {
            if let Some(g) = self.graph.take_grad(v) {
                out.push((p, g));
            }
        }
        out
    }

    pub fn take_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let l = self.graph.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l}")));
        }
        self.graph.backward(loss)
    }
}
