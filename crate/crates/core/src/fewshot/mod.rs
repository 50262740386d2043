//! Classifier mathematics over embeddings: scaled cosine similarity, flat
//! and dense parametric classifiers, prototypes, imprinting and inference.
//!
//! Everything here works on plain values. Differentiable counterparts used
//! during training live in [`losses`]. Class indices are zero-based and
//! `argmax` ties resolve to the lowest index.

pub mod cam;
pub mod losses;

use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{cross_entropy, softmax};
use crate::linalg::exact_sum;
use crate::models::{pool_embedding, FeatureMap, Pooling};
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub use losses::Classifier;

/// `τ · <x̂, ŷ>` with Frobenius normalization of both operands.
pub fn scaled_cosine(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("scaled_cosine", &[x.len()], &[y.len()]));
    }
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(tau * (dot / (nx * ny)))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Bank of class weights, one `d`-vector per class, stored as `[c, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Tensor);

impl ClassWeights {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape("class_weights", matrix.shape(), &[2]));
        }
        Ok(ClassWeights(matrix))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    /// A bank with no classes yet, of depth `d`.
    pub fn empty(d: usize) -> Self {
        ClassWeights(Tensor::zeros(&[0, d]))
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let d = self.depth().max(1);
        self.0.data().chunks(d)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// Per-class mean embeddings with the support counts behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub weights: ClassWeights,
    pub counts: Vec<usize>,
}

impl Prototypes {
    pub fn classes(&self) -> usize {
        self.weights.classes()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.weights.row(j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    NegSqEuclid,
}

impl FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "neg_sq_euclid" | "euclid" => Ok(Similarity::NegSqEuclid),
            other => Err(Error::Argument(format!("unknown similarity {other:?}"))),
        }
    }
}

/// Softmax over scaled cosine similarities to every class weight.
pub fn flat_classify(v: &[f64], w: &ClassWeights, tau: f64) -> Result<Vec<f64>> {
    if v.len() != w.depth() {
        return Err(Error::shape("flat_classify", &[v.len()], w.matrix().shape()));
    }
    let logits = w
        .rows()
        .take(w.classes())
        .map(|wj| scaled_cosine(v, wj, tau))
        .collect::<Result<Vec<_>>>()?;
    softmax(&logits)
}

/// Per-location class probabilities `[r, c]`: the shared classifier applied
/// to every fiber of the map.
pub fn dense_classify(fm: &FeatureMap, w: &ClassWeights, tau: f64) -> Result<Tensor> {
    let mut out = Vec::with_capacity(fm.r() * w.classes());
    for (k, fiber) in fm.fibers().enumerate() {
        let row = flat_classify(fiber, w, tau).map_err(|e| match e {
            Error::Domain(_) => Error::Domain(format!("zero-norm fiber at location {k}")),
            other => other,
        })?;
        out.extend(row);
    }
    Tensor::new(vec![fm.r(), w.classes()], out)
}

fn check_label(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(Error::Index(format!("label {y} out of range for {c} classes")));
    }
    Ok(())
}

/// `Σ_i -log f(v_i)[y_i]` over pooled (or flat) embeddings.
pub fn flat_cost(batch: &[(Vec<f64>, usize)], w: &ClassWeights, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for (v, y) in batch {
        check_label(*y, w.classes())?;
        total += cross_entropy(&flat_classify(v, w, tau)?, *y)?;
    }
    Ok(total)
}

/// `Σ_i Σ_k -log f^(k)(x_i)[y_i]`: the loss applied at every location.
pub fn dense_cost(batch: &[(FeatureMap, usize)], w: &ClassWeights, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for (fm, y) in batch {
        check_label(*y, w.classes())?;
        let probs = dense_classify(fm, w, tau)?;
        for row in probs.rows() {
            total += cross_entropy(row, *y)?;
        }
    }
    Ok(total)
}

/// Mean embedding per class over the index subset `subset`.
pub fn compute_prototypes(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    subset: &[usize],
    classes: usize,
) -> Result<Prototypes> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape("compute_prototypes", &[embeddings.len()], &[labels.len()]));
    }
    let d = embeddings.first().map_or(0, |e| e.len());
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); classes];
    for &i in subset {
        let e = embeddings
            .get(i)
            .ok_or_else(|| Error::Index(format!("support index {i} out of range")))?;
        if e.len() != d {
            return Err(Error::shape("compute_prototypes", &[d], &[e.len()]));
        }
        let y = labels[i];
        check_label(y, classes)?;
        members[y].push(e);
    }
    if let Some(j) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::Argument(format!("class {j} has no support examples")));
    }
    // Exact sums make the mean independent of support order and multiplicity.
    let means: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            (0..d)
                .map(|k| exact_sum(m.iter().map(|e| e[k])) / m.len() as f64)
                .collect()
        })
        .collect();
    Ok(Prototypes {
        weights: ClassWeights::from_rows(&means)?,
        counts: members.iter().map(Vec::len).collect(),
    })
}

/// Softmax over similarities of `v` to every prototype. Cosine scores are
/// multiplied by `tau` when given; squared distances are not scaled.
pub fn proto_classify(v: &[f64], p: &Prototypes, sim: Similarity, tau: Option<f64>) -> Result<Vec<f64>> {
    match sim {
        Similarity::Cosine => flat_classify(v, &p.weights, tau.unwrap_or(1.0)),
        Similarity::NegSqEuclid => {
            if v.len() != p.weights.depth() {
                return Err(Error::shape("proto_classify", &[v.len()], p.weights.matrix().shape()));
            }
            let logits: Vec<f64> = p
                .weights
                .rows()
                .take(p.classes())
                .map(|pj| -v.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            softmax(&logits)
        }
    }
}

/// Episodic cost `Σ_{i∈Q} -log f[P](x_i)[y_i]` with prototypes from `support`.
pub fn proto_cost(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    support: &[usize],
    query: &[usize],
    classes: usize,
    sim: Similarity,
    tau: Option<f64>,
) -> Result<f64> {
    check_partition(embeddings.len(), support, query)?;
    let p = compute_prototypes(embeddings, labels, support, classes)?;
    let mut total = 0.0;
    for &i in query {
        total += cross_entropy(&proto_classify(&embeddings[i], &p, sim, tau)?, labels[i])?;
    }
    Ok(total)
}

pub(crate) fn check_partition(n: usize, support: &[usize], query: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in support.iter().chain(query) {
        if i >= n {
            return Err(Error::Index(format!("episode index {i} out of range for {n}")));
        }
        if seen[i] {
            return Err(Error::Argument(format!("example {i} appears twice in the episode")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Append prototypes as new class rows: `W' = (W, P)`.
pub fn imprint(w: &ClassWeights, p: &Prototypes) -> Result<ClassWeights> {
    if w.depth() != p.weights.depth() {
        return Err(Error::shape("imprint", w.matrix().shape(), p.weights.matrix().shape()));
    }
    let mut data = w.matrix().data().to_vec();
    data.extend_from_slice(p.weights.matrix().data());
    ClassWeights::new(Tensor::new(vec![w.classes() + p.classes(), w.depth()], data)?)
}

/// Nearest prototype by cosine similarity of the pooled query.
pub fn predict_nearest(query: &FeatureMap, p: &Prototypes, pooling: Pooling) -> Result<usize> {
    let v = pool_embedding(query, pooling);
    let scores = p
        .weights
        .rows()
        .take(p.classes())
        .map(|pj| scaled_cosine(&v, pj, 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&scores))
}

/// Average over locations of the per-location soft assignment to prototypes.
pub fn predict_dense(query: &FeatureMap, p: &Prototypes, tau: f64) -> Result<Vec<f64>> {
    let probs = dense_classify(query, &p.weights, tau)?;
    let c = p.classes();
    let mut out = vec![0.0; c];
    for row in probs.rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let r = query.r() as f64;
    out.iter_mut().for_each(|v| *v /= r);
    Ok(out)
}

/// Random class weights `N(0, 1)` for a fresh classifier.
pub(crate) fn init_class_weights(store: &mut ParamStore, classes: usize, d: usize, seed: u64) -> ParamId {
    let mut rng = stream(seed, Purpose::Init, 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..classes * d).map(|_| normal.sample(&mut rng)).collect();
    store.add(
        "head.weight",
        Tensor::new(vec![classes, d], data).expect("shape"),
        ParamKind::Weight,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(rows: &[&[f64]]) -> ClassWeights {
        ClassWeights::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn scaled_cosine_examples() {
        assert!((scaled_cosine(&[3.0, 4.0], &[3.0, 4.0], 10.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(scaled_cosine(&[1.0, 0.0], &[0.0, 1.0], 10.0).unwrap(), 0.0);
        assert!((scaled_cosine(&[1.0, 1.0], &[1.0, 0.0], 2.0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            scaled_cosine(&[0.0, 0.0], &[1.0, 0.0], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn flat_classify_examples() {
        let bank = w(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(argmax(&flat_classify(&[1.0, 0.0, 0.0], &bank, 10.0).unwrap()), 0);

        let p = flat_classify(&[0.3, -1.0, 2.0], &bank, 1e-9).unwrap();
        let spread = p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-8);

        let two = w(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = flat_classify(&[1.0, 0.0], &two, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731059).abs() < 1e-6 && (p[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn dense_classify_single_location_and_identical_fibers() {
        let bank = w(&[&[1.0, 0.2], &[-0.5, 1.0]]);
        let fm = FeatureMap::new(1, 1, 2, vec![0.7, 0.1]).unwrap();
        let dense = dense_classify(&fm, &bank, 3.0).unwrap();
        assert_eq!(dense.data(), flat_classify(&[0.7, 0.1], &bank, 3.0).unwrap().as_slice());

        let fm = FeatureMap::new(2, 2, 2, [0.7, 0.1].repeat(4)).unwrap();
        let dense = dense_classify(&fm, &bank, 3.0).unwrap();
        for k in 1..4 {
            assert_eq!(dense.row(k), dense.row(0));
        }
        for row in dense.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_classify_names_zero_fiber() {
        let bank = w(&[&[1.0, 0.0]]);
        let fm = FeatureMap::new(1, 2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let err = dense_classify(&fm, &bank, 1.0).unwrap_err();
        assert!(err.to_string().contains("location 1"), "{err}");
    }

    #[test]
    fn cost_examples() {
        // uniform predictions: orthogonal query to both class weights
        let bank = w(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let fm = FeatureMap::new(2, 1, 3, vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let c = dense_cost(&[(fm.clone(), 0)], &bank, 10.0).unwrap();
        assert!((c - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(dense_cost(&[(fm, 2)], &bank, 10.0), Err(Error::Index(_))));

        let five = ClassWeights::from_rows(
            &(0..5)
                .map(|j| {
                    let mut r = vec![0.0; 6];
                    r[j] = 1.0;
                    r
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let q = vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let c = flat_cost(&[(q.clone(), 0), (q.clone(), 3), (q, 4)], &five, 10.0).unwrap();
        assert!((c - 3.0 * 5f64.ln()).abs() < 1e-12);

        let onehot = w(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = flat_cost(&[(vec![1.0, 0.0], 0)], &onehot, 1e4).unwrap();
        assert!(c < 1e-9);
    }

    #[test]
    fn dense_and_flat_cost_agree_at_r1() {
        let bank = w(&[&[1.0, 0.2, -0.3], &[-0.5, 1.0, 0.4], &[0.1, 0.1, 0.9]]);
        let vs = [vec![0.3, -0.2, 0.8], vec![-1.0, 0.5, 0.25]];
        let flat: Vec<(Vec<f64>, usize)> = vs.iter().cloned().zip([2, 0]).collect();
        let dense: Vec<(FeatureMap, usize)> = vs
            .iter()
            .map(|v| FeatureMap::new(1, 1, 3, v.clone()).unwrap())
            .zip([2, 0])
            .collect();
        assert_eq!(
            flat_cost(&flat, &bank, 7.0).unwrap().to_bits(),
            dense_cost(&dense, &bank, 7.0).unwrap().to_bits()
        );
    }

    #[test]
    fn prototype_examples() {
        let e = vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0]];
        let p = compute_prototypes(&e, &[0, 0, 1], &[0, 1, 2], 2).unwrap();
        assert_eq!(p.row(0), &[2.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 5.0]);
        assert_eq!(p.counts, vec![2, 1]);

        let dup = compute_prototypes(&e, &[0, 0, 1], &[0, 1, 2, 0, 1, 2], 2).unwrap();
        assert_eq!(dup.weights, p.weights);

        let err = compute_prototypes(&e, &[0, 0, 1], &[0, 1], 2).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn proto_classify_examples() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = compute_prototypes(&e, &[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(
            argmax(&proto_classify(&[0.0, 1.0], &p, Similarity::Cosine, Some(10.0)).unwrap()),
            1
        );
        let eq = proto_classify(&[0.5, 0.5], &p, Similarity::NegSqEuclid, None).unwrap();
        assert!((eq[0] - eq[1]).abs() < 1e-12);

        let v = [0.3, 0.9];
        let got = proto_classify(&v, &p, Similarity::NegSqEuclid, None).unwrap();
        let d0 = (0.3f64 - 1.0).powi(2) + 0.81;
        let d1 = 0.09 + (0.9f64 - 1.0).powi(2);
        let z = (-d0).exp() + (-d1).exp();
        assert!((got[0] - (-d0).exp() / z).abs() < 1e-12);
        assert!((got[1] - (-d1).exp() / z).abs() < 1e-12);
    }

    #[test]
    fn proto_cost_examples() {
        // two classes, uniform predictions: every query orthogonal-equidistant
        let e = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0, 0.0, 3.0],
            vec![0.0, 0.0, 4.0],
        ];
        let labels = [0, 1, 0, 1, 0, 1];
        let c = proto_cost(&e, &labels, &[0, 1], &[2, 3, 4, 5], 2, Similarity::Cosine, Some(10.0)).unwrap();
        assert!((c - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]];
        let c = proto_cost(&e, &[0, 1, 0], &[0, 1], &[2], 2, Similarity::Cosine, Some(100.0)).unwrap();
        assert!(c < 1e-12);

        assert!(proto_cost(&e, &[0, 1, 0], &[0], &[2], 2, Similarity::Cosine, None).is_err());
        assert!(proto_cost(&e, &[0, 1, 0], &[0, 1], &[1], 2, Similarity::Cosine, None).is_err());
    }

    #[test]
    fn imprint_examples() {
        let base = w(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let e = vec![vec![2.0, 3.0], vec![-1.0, 0.5]];
        let p = compute_prototypes(&e, &[0, 1], &[0, 1], 2).unwrap();
        let wide = imprint(&base, &p).unwrap();
        assert_eq!(wide.classes(), 5);
        assert_eq!(&wide.matrix().data()[..6], base.matrix().data());

        let empty = ClassWeights::empty(2);
        assert_eq!(imprint(&empty, &p).unwrap(), p.weights);

        let deep = w(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(imprint(&deep, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn imprinted_novel_classes_are_recognized() {
        let base = w(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let e = vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
        let p = compute_prototypes(&e, &[0, 1], &[0, 1], 2).unwrap();
        let wide = imprint(&base, &p).unwrap();
        for (j, v) in e.iter().enumerate() {
            let probs = flat_classify(v, &wide, 10.0).unwrap();
            assert_eq!(argmax(&probs[2..]), j);
        }
    }

    #[test]
    fn predict_nearest_examples() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = compute_prototypes(&e, &[0, 1], &[0, 1], 2).unwrap();
        let q = FeatureMap::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
        assert_eq!(predict_nearest(&q, &p, Pooling::Gap).unwrap(), 0);
        let q = FeatureMap::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(predict_nearest(&q, &p, Pooling::Gap).unwrap(), 1);

        let scaled = compute_prototypes(&[vec![5.0, 0.0], vec![0.0, 5.0]], &[0, 1], &[0, 1], 2).unwrap();
        let q5 = FeatureMap::new(1, 1, 2, vec![4.5, 0.5]).unwrap();
        assert_eq!(predict_nearest(&q5, &scaled, Pooling::Gap).unwrap(), 0);

        let zero = FeatureMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            predict_nearest(&zero, &p, Pooling::Gap),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn predict_dense_examples() {
        let p = compute_prototypes(&[vec![1.0, 0.3], vec![-0.2, 1.0]], &[0, 1], &[0, 1], 2).unwrap();
        let fm = FeatureMap::new(1, 1, 2, vec![0.4, 0.6]).unwrap();
        let dense = predict_dense(&fm, &p, 10.0).unwrap();
        let flat = proto_classify(&[0.4, 0.6], &p, Similarity::Cosine, Some(10.0)).unwrap();
        assert_eq!(dense, flat);

        let same = FeatureMap::new(2, 2, 2, [0.4, 0.6].repeat(4)).unwrap();
        let avg = predict_dense(&same, &p, 10.0).unwrap();
        for (a, b) in avg.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((avg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
