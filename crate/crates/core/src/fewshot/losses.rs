//! Differentiable classifier costs built on the graph tape.
//!
//! All costs are sums over examples (and over locations for the dense
//! variants); trainers divide by the term count themselves.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

use super::{check_partition, init_class_weights, ClassWeights};

/// Cosine logits `τ · ê_i · ŵ_j` for `emb: [m, d]` and `weights: [c, d]`.
pub fn cosine_logits(g: &mut Graph, emb: Var, weights: Var, tau: Var) -> Result<Var> {
    let e = g.normalize_rows(emb)?;
    let w = g.normalize_rows(weights)?;
    let cos = g.matmul(e, w, true)?;
    g.mul_scalar(cos, tau)
}

/// Summed cross-entropy of softmaxed cosine logits.
pub fn cosine_ce(g: &mut Graph, emb: Var, weights: Var, tau: Var, labels: &[usize]) -> Result<Var> {
    let logits = cosine_logits(g, emb, weights, tau)?;
    let probs = g.softmax_rows(logits)?;
    g.cross_entropy(probs, labels)
}

/// Flatten `[n, h, w, d]` maps to `[n·h·w, d]` with every label repeated per location.
pub fn flatten_locations(g: &mut Graph, maps: Var, labels: &[usize]) -> Result<(Var, Vec<usize>)> {
    let s = g.shape(maps).to_vec();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(Error::shape("flatten_locations", &s, &[labels.len()]));
    }
    let r = s[1] * s[2];
    let flat = g.reshape(maps, &[s[0] * r, s[3]])?;
    let rep = labels.iter().flat_map(|&y| std::iter::repeat_n(y, r)).collect();
    Ok((flat, rep))
}

/// Dense classification cost: the cosine classifier at every location.
pub fn dense_loss(g: &mut Graph, maps: Var, weights: Var, tau: Var, labels: &[usize]) -> Result<Var> {
    let (flat, rep) = flatten_locations(g, maps, labels)?;
    cosine_ce(g, flat, weights, tau, &rep)
}

/// Pooled classification cost: the cosine classifier on GAP embeddings.
pub fn gap_loss(g: &mut Graph, maps: Var, weights: Var, tau: Var, labels: &[usize]) -> Result<Var> {
    let pooled = g.global_avg_pool(maps)?;
    cosine_ce(g, pooled, weights, tau, labels)
}

/// Constant `[c, |S|]` matrix averaging support rows into class means.
fn averaging_matrix(labels: &[usize], support: &[usize], classes: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; classes];
    for &i in support {
        let y = labels[i];
        if y >= classes {
            return Err(Error::Index(format!("label {y} out of range for {classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Argument(format!("class {j} has no support examples")));
    }
    let mut a = Tensor::zeros(&[classes, support.len()]);
    let n = support.len();
    for (col, &i) in support.iter().enumerate() {
        let y = labels[i];
        a.data_mut()[y * n + col] = 1.0 / counts[y] as f64;
    }
    Ok(a)
}

/// Prototypes `[c, d]` as class means of the support rows of `emb: [n, d]`.
pub fn prototypes_var(g: &mut Graph, emb: Var, labels: &[usize], support: &[usize], classes: usize) -> Result<Var> {
    let a = averaging_matrix(labels, support, classes)?;
    let a = g.constant(a);
    let s = g.gather_rows(emb, support)?;
    g.matmul(a, s, false)
}

/// Episodic cost on pooled embeddings: queries classified against
/// prototypes of the support subset by scaled cosine.
pub fn proto_loss(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    support: &[usize],
    query: &[usize],
    classes: usize,
    tau: Var,
) -> Result<Var> {
    check_partition(g.shape(emb)[0], support, query)?;
    let p = prototypes_var(g, emb, labels, support, classes)?;
    let q = g.gather_rows(emb, query)?;
    let ql: Vec<usize> = query.iter().map(|&i| labels[i]).collect();
    cosine_ce(g, q, p, tau, &ql)
}

/// Episodic cost with every query location classified against prototypes
/// of GAP-pooled supports.
pub fn dense_proto_loss(
    g: &mut Graph,
    maps: Var,
    labels: &[usize],
    support: &[usize],
    query: &[usize],
    classes: usize,
    tau: Var,
) -> Result<Var> {
    check_partition(g.shape(maps)[0], support, query)?;
    let pooled = g.global_avg_pool(maps)?;
    let p = prototypes_var(g, pooled, labels, support, classes)?;
    let q = g.gather_rows(maps, query)?;
    let ql: Vec<usize> = query.iter().map(|&i| labels[i]).collect();
    let (flat, rep) = flatten_locations(g, q, &ql)?;
    cosine_ce(g, flat, p, tau, &rep)
}

/// Trainable cosine classifier over the base classes.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub weight: ParamId,
    pub tau: ParamId,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, classes: usize, d: usize, tau: f64, seed: u64) -> Result<Self> {
        if classes == 0 || d == 0 {
            return Err(Error::Argument("classifier needs at least one class and depth".into()));
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::Domain(format!("scale must be positive, got {tau}")));
        }
        let weight = init_class_weights(store, classes, d, seed);
        let tau = store.add("head.tau", Tensor::scalar(tau), ParamKind::Weight, false);
        Ok(Classifier { weight, tau })
    }

    pub fn classes(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.value(self.tau).item()
    }

    pub fn weights(&self, store: &ParamStore) -> ClassWeights {
        ClassWeights::new(store.value(self.weight).clone()).expect("rank-2 weights")
    }

    /// Dense or pooled cost of a batch of feature maps inside a session.
    pub fn loss(&self, s: &mut Session, maps: Var, labels: &[usize], dense: bool) -> Result<Var> {
        let w = s.param(self.weight);
        let tau = s.param(self.tau);
        if dense {
            dense_loss(&mut s.graph, maps, w, tau, labels)
        } else {
            gap_loss(&mut s.graph, maps, w, tau, labels)
        }
    }
}
