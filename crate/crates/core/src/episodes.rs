//! Few-shot task sampling and the evaluation protocol: mean accuracy over
//! many tasks with a 95% confidence interval.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fewshot::{
    argmax, compute_prototypes, flat_classify, imprint, predict_dense, predict_nearest, ClassWeights,
};
use crate::implant::{train_implants, widen, ImplantConfig, ImplantSpec};
use crate::models::{pool_embedding, FeatureMap, Model, Pooling};
use crate::rng::{stream, Purpose, Rng};
use crate::tensor::Tensor;

pub const Z95: f64 = 1.96;

/// A `way`-way `shot`-shot task. Indices point into the example pool the
/// task was sampled from; labels are task-local `0..way`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotTask {
    pub way: usize,
    pub shot: usize,
    /// Pool class ids, in task-label order.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Sample `way` classes from `pool` (example indices per class), then
/// `shot` supports and `queries` queries per class without replacement.
pub fn sample_task(pool: &[Vec<usize>], way: usize, shot: usize, queries: usize, rng: &mut Rng) -> Result<FewShotTask> {
    if way == 0 || shot == 0 {
        return Err(Error::Argument("way and shot must be >= 1".into()));
    }
    if way > pool.len() {
        return Err(Error::Argument(format!(
            "{way}-way task needs {way} classes, only {} available",
            pool.len()
        )));
    }
    if let Some(j) = pool.iter().position(|c| c.len() < shot + queries) {
        return Err(Error::Argument(format!(
            "class {j} has {} examples, task needs {}",
            pool[j].len(),
            shot + queries
        )));
    }
    let classes = sample(rng, pool.len(), way).into_vec();
    let mut task = FewShotTask {
        way,
        shot,
        classes: classes.clone(),
        support: Vec::with_capacity(way * shot),
        support_labels: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * queries),
        query_labels: Vec::with_capacity(way * queries),
    };
    for (label, &c) in classes.iter().enumerate() {
        let picks = sample(rng, pool[c].len(), shot + queries).into_vec();
        for (n, &p) in picks.iter().enumerate() {
            if n < shot {
                task.support.push(pool[c][p]);
                task.support_labels.push(label);
            } else {
                task.query.push(pool[c][p]);
                task.query_labels.push(label);
            }
        }
    }
    Ok(task)
}

/// `count` tasks, task `t` drawn from its own stream keyed by `(seed, t)`.
pub fn sample_tasks(
    pool: &[Vec<usize>],
    way: usize,
    shot: usize,
    queries: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<FewShotTask>> {
    (0..count)
        .map(|t| sample_task(pool, way, shot, queries, &mut stream(seed, Purpose::Tasks, t as u64)))
        .collect()
}

/// How queries are compared with prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Pool the query, then nearest prototype by cosine similarity.
    Pooled(Pooling),
    /// Average the per-location soft assignments.
    Dense,
}

impl FromStr for QueryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(QueryMode::Dense),
            other => Ok(QueryMode::Pooled(other.parse()?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub support_pool: Pooling,
    pub query: QueryMode,
    /// Scale for dense inference.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            support_pool: Pooling::Gap,
            query: QueryMode::Dense,
            tau: 10.0,
        }
    }
}

/// Aggregate of per-task accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub half_width: f64,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    /// Mean and `1.96·σ/√T` with `σ` the sample standard deviation.
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let t = accuracies.len();
        let mean = if t == 0 {
            0.0
        } else {
            accuracies.iter().sum::<f64>() / t as f64
        };
        let half_width = if t < 2 {
            0.0
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
            Z95 * var.sqrt() / (t as f64).sqrt()
        };
        EvalReport {
            mean,
            half_width,
            accuracies,
        }
    }

    pub fn tasks(&self) -> usize {
        self.accuracies.len()
    }

    /// `task_id<TAB>accuracy` lines, then `mean` and `ci95`. Values use
    /// shortest round-trip formatting so parsing recovers them exactly.
    pub fn to_machine(&self) -> String {
        let mut out = String::new();
        for (t, a) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{t}\t{a:?}\n"));
        }
        out.push_str(&format!("mean\t{:?}\nci95\t{:?}\n", self.mean, self.half_width));
        out
    }

    pub fn parse_machine(text: &str) -> Result<Self> {
        let mut accuracies = Vec::new();
        let (mut mean, mut ci) = (None, None);
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(at, format!("bad report line {line:?}"));
            let (key, value) = line.split_once('\t').ok_or_else(bad)?;
            let value: f64 = value.trim().parse().map_err(|_| bad())?;
            match key {
                "mean" => mean = Some(value),
                "ci95" => ci = Some(value),
                id => {
                    let id: usize = id.parse().map_err(|_| bad())?;
                    if id != accuracies.len() {
                        return Err(bad());
                    }
                    accuracies.push(value);
                }
            }
        }
        match (mean, ci) {
            (Some(mean), Some(half_width)) => Ok(EvalReport {
                mean,
                half_width,
                accuracies,
            }),
            _ => Err(Error::format(text.len(), "report lacks mean or ci95 line")),
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>10}", "tasks", self.tasks())?;
        writeln!(f, "{:<10}{:>9.2}%", "accuracy", 100.0 * self.mean)?;
        write!(f, "{:<10}{:>9.2}%", "ci95 ±", 100.0 * self.half_width)
    }
}

/// Prototypes of a task from pooled support maps.
pub fn task_prototypes(
    maps: &[FeatureMap],
    support: &[usize],
    labels: &[usize],
    way: usize,
    pooling: Pooling,
) -> Result<crate::fewshot::Prototypes> {
    let pooled: Vec<Vec<f64>> = support.iter().map(|&i| pool_embedding(&maps[i], pooling)).collect();
    let idx: Vec<usize> = (0..support.len()).collect();
    compute_prototypes(&pooled, labels, &idx, way)
}

/// Predicted task label of one query map.
pub fn classify_query(query: &FeatureMap, protos: &crate::fewshot::Prototypes, cfg: &EvalConfig) -> Result<usize> {
    match cfg.query {
        QueryMode::Pooled(p) => predict_nearest(query, protos, p),
        QueryMode::Dense => Ok(argmax(&predict_dense(query, protos, cfg.tau)?)),
    }
}

/// Accuracy of one task over precomputed feature maps.
pub fn task_accuracy(maps: &[FeatureMap], task: &FewShotTask, cfg: &EvalConfig) -> Result<f64> {
    let protos = task_prototypes(maps, &task.support, &task.support_labels, task.way, cfg.support_pool)?;
    let mut correct = 0usize;
    for (&q, &y) in task.query.iter().zip(&task.query_labels) {
        if classify_query(&maps[q], &protos, cfg)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.query.len().max(1) as f64)
}

/// Evaluate every task in parallel; the report is ordered by task index.
pub fn evaluate(maps: &[FeatureMap], tasks: &[FewShotTask], cfg: &EvalConfig) -> Result<EvalReport> {
    let accs = tasks
        .par_iter()
        .map(|t| task_accuracy(maps, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accs))
}

/// A novel task plus queries from held-out base-class images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BothTask {
    pub novel: FewShotTask,
    /// Indices into the base query pool and their base class labels.
    pub base_query: Vec<usize>,
    pub base_labels: Vec<usize>,
}

/// Pair each novel task with `base_queries` random held-out base images.
pub fn sample_both_tasks(
    novel_tasks: Vec<FewShotTask>,
    base_pool: &[Vec<usize>],
    base_queries: usize,
    seed: u64,
) -> Result<Vec<BothTask>> {
    let flat: Vec<(usize, usize)> = base_pool
        .iter()
        .enumerate()
        .flat_map(|(c, idx)| idx.iter().map(move |&i| (i, c)))
        .collect();
    if base_queries > flat.len() {
        return Err(Error::Argument(format!(
            "{base_queries} base queries requested, pool holds {}",
            flat.len()
        )));
    }
    Ok(novel_tasks
        .into_iter()
        .enumerate()
        .map(|(t, novel)| {
            let mut rng = stream(seed, Purpose::Eval, t as u64);
            let picks = sample(&mut rng, flat.len(), base_queries).into_vec();
            BothTask {
                novel,
                base_query: picks.iter().map(|&p| flat[p].0).collect(),
                base_labels: picks.iter().map(|&p| flat[p].1).collect(),
            }
        })
        .collect())
}

/// Classify novel and base queries over the imprinted bank `(W, P)`.
/// Novel labels are offset by the number of base classes.
pub fn evaluate_both(
    base_weights: &ClassWeights,
    novel_maps: &[FeatureMap],
    base_maps: &[FeatureMap],
    tasks: &[BothTask],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let c = base_weights.classes();
    let accs = tasks
        .par_iter()
        .map(|t| {
            let p = task_prototypes(
                novel_maps,
                &t.novel.support,
                &t.novel.support_labels,
                t.novel.way,
                cfg.support_pool,
            )?;
            let bank = imprint(base_weights, &p)?;
            let queries = t
                .novel
                .query
                .iter()
                .zip(&t.novel.query_labels)
                .map(|(&q, &y)| (&novel_maps[q], c + y))
                .chain(
                    t.base_query
                        .iter()
                        .zip(&t.base_labels)
                        .map(|(&q, &y)| (&base_maps[q], y)),
                );
            let mut correct = 0usize;
            let mut total = 0usize;
            for (fm, y) in queries {
                let pred = match cfg.query {
                    QueryMode::Pooled(pool) => argmax(&flat_classify(&pool_embedding(fm, pool), &bank, cfg.tau)?),
                    QueryMode::Dense => {
                        let probs = crate::fewshot::dense_classify(fm, &bank, cfg.tau)?;
                        let mut avg = vec![0.0; bank.classes()];
                        for row in probs.rows() {
                            avg.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        argmax(&avg)
                    }
                };
                correct += (pred == y) as usize;
                total += 1;
            }
            Ok(correct as f64 / total.max(1) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accs))
}

/// Per-task implants: for each task, widen a copy of `model`, fit the
/// implants on the task's supports, then classify its queries with the
/// widened embedding. `images` is the pool the task indices refer to.
pub fn evaluate_implanted(
    model: &Model,
    images: &Tensor,
    tasks: &[FewShotTask],
    implant: &ImplantConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let accs = tasks
        .par_iter()
        .map(|t| {
            let mut m = model.clone();
            let spec = ImplantSpec::last_block(m.config(), implant.channels);
            widen(&mut m, spec)?;
            let support = images.select(&t.support)?;
            train_implants(&mut m, &support, &t.support_labels, t.way, implant)?;
            let mut all = t.support.clone();
            all.extend_from_slice(&t.query);
            let maps = m.embed_maps(&images.select(&all)?)?;
            let n = t.support.len();
            let local = FewShotTask {
                support: (0..n).collect(),
                query: (n..all.len()).collect(),
                ..t.clone()
            };
            task_accuracy(&maps, &local, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accs))
}
