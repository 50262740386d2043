//! Stage-1 trainers: dense or pooled classification over the base classes,
//! and episodic prototypical training.

use std::str::FromStr;

use log::debug;
use rand::seq::index::sample;
use rand::Rng as _;

use crate::episodes::sample_task;
use crate::error::{Error, Result};
use crate::fewshot::losses::proto_loss;
use crate::fewshot::{argmax, dense_classify, flat_classify};
use crate::models::{pool_embedding, Model, Pooling};
use crate::nn::Session;
use crate::optim::{OptimConfig, OptimKind, Optimizer};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Classifier and loss at every spatial location.
    Dense,
    /// Classifier on the globally average-pooled embedding.
    Gap,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(LossMode::Dense),
            "gap" => Ok(LossMode::Gap),
            other => Err(Error::Argument(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub tau_init: f64,
    pub loss: LossMode,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch: 32,
            seed: 17,
            tau_init: 10.0,
            loss: LossMode::Dense,
            optimizer: OptimKind::SgdNesterov,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn default_lr(kind: OptimKind) -> f64 {
        match kind {
            OptimKind::SgdNesterov => 0.1,
            OptimKind::Adam | OptimKind::AdamW => 1e-3,
        }
    }

    fn optim(&self) -> OptimConfig {
        match self.optimizer {
            OptimKind::SgdNesterov => OptimConfig::sgd(self.lr, self.momentum, self.weight_decay),
            OptimKind::Adam => OptimConfig::adam(self.lr, self.weight_decay),
            OptimKind::AdamW => OptimConfig::adamw(self.lr, self.weight_decay),
        }
    }

    /// SGD decays tenfold at 60% and again at 80% of the run.
    fn lr_at(&self, it: usize) -> f64 {
        if self.optimizer != OptimKind::SgdNesterov {
            return self.lr;
        }
        let f = it as f64 / self.iterations.max(1) as f64;
        if f >= 0.8 {
            self.lr * 0.01
        } else if f >= 0.6 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Map original class ids to `0..classes.len()` in the order given.
pub fn relabel(labels: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|y| {
            classes
                .iter()
                .position(|c| c == y)
                .ok_or_else(|| Error::Index(format!("class {y} not among the training classes")))
        })
        .collect()
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Argument(format!(
            "training needs at least 2 classes, got {classes}"
        )));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Index(format!("label {y} out of range for {classes} classes")))? += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Argument(format!("class {j} has no training examples")));
    }
    Ok(())
}

fn flip_horizontal(batch: &mut Tensor, i: usize) {
    let s = batch.shape().to_vec();
    let (h, w, c) = (s[1], s[2], s[3]);
    let img = &mut batch.data_mut()[i * h * w * c..(i + 1) * h * w * c];
    for y in 0..h {
        for x in 0..w / 2 {
            for k in 0..c {
                img.swap((y * w + x) * c + k, (y * w + w - 1 - x) * c + k);
            }
        }
    }
}

/// Train embedding, class weights and scale on labelled images
/// `[n, h, w, c]` with labels in `0..classes`. Returns the per-iteration
/// loss, normalized by the number of loss terms.
pub fn stage1_train(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    check_labels(labels, classes)?;
    if cfg.batch < 2 {
        return Err(Error::Argument("batch size must be >= 2 for batch norm".into()));
    }
    if model.head.is_none() {
        model.add_classifier(classes, cfg.tau_init)?;
    }
    let head = model.head.clone().expect("classifier present");
    if head.classes(&model.store) != classes {
        return Err(Error::shape(
            "stage1_train",
            model.store.value(head.weight).shape(),
            &[classes],
        ));
    }
    let n = labels.len();
    let batch = cfg.batch.min(n);
    let params = model.store.trainable();
    let mut opt = Optimizer::new(cfg.optim());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = stream(cfg.seed, Purpose::Batches, it as u64);
        let idx = sample(&mut rng, n, batch).into_vec();
        let mut x = images.select(&idx)?;
        if cfg.flip {
            for i in 0..batch {
                if rng.random_bool(0.5) {
                    flip_horizontal(&mut x, i);
                }
            }
        }
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut s = Session::new(&model.store, true);
        let xv = s.graph.constant(x);
        let maps = model.embed_var(&mut s, xv)?;
        let shape = s.graph.shape(maps).to_vec();
        let dense = cfg.loss == LossMode::Dense;
        let terms = if dense { batch * shape[1] * shape[2] } else { batch };
        let total = head.loss(&mut s, maps, &ys, dense)?;
        let loss = s.graph.scale(total, 1.0 / terms as f64);
        let value = s.graph.value(loss).item();
        s.backward(loss)?;
        let grads = s.param_grads();
        let updates = s.take_updates();
        drop(s);
        opt.set_lr(cfg.lr_at(it));
        opt.step(&mut model.store, &params, &grads)?;
        model.store.apply_stat_updates(&updates);
        let tau = &mut model.store.get_mut(head.tau).value.data_mut()[0];
        *tau = tau.max(1e-3);
        if it % 50 == 0 {
            debug!("iter {it} loss {value:.5}");
        }
        losses.push(value);
    }
    Ok(losses)
}

/// Settings for episodic (prototypical) stage-1 training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub lr: f64,
    /// Fixed scale of the cosine similarities.
    pub tau: f64,
}

impl Default for EpisodicConfig {
    fn default() -> Self {
        EpisodicConfig {
            way: 5,
            shot: 5,
            queries: 6,
            episodes: 500,
            seed: 17,
            lr: 1e-3,
            tau: 10.0,
        }
    }
}

/// Episodic training: per episode, prototypes from the supports and the
/// cost of the queries against them. Returns the per-episode mean loss.
pub fn episodic_stage1_train(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &EpisodicConfig,
) -> Result<Vec<f64>> {
    check_labels(labels, classes)?;
    if cfg.way > classes {
        return Err(Error::Argument(format!(
            "{}-way episodes need {} classes, have {classes}",
            cfg.way, cfg.way
        )));
    }
    let mut pool = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        pool[y].push(i);
    }
    let params = model.store.trainable();
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.lr, 0.0));
    let mut losses = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let task = sample_task(
            &pool,
            cfg.way,
            cfg.shot,
            cfg.queries,
            &mut stream(cfg.seed, Purpose::Episodes, e as u64),
        )?;
        let mut all = task.support.clone();
        all.extend_from_slice(&task.query);
        let mut ys = task.support_labels.clone();
        ys.extend_from_slice(&task.query_labels);
        let ns = task.support.len();
        let support: Vec<usize> = (0..ns).collect();
        let query: Vec<usize> = (ns..all.len()).collect();

        let mut s = Session::new(&model.store, true);
        let x = s.graph.constant(images.select(&all)?);
        let maps = model.embed_var(&mut s, x)?;
        let pooled = s.graph.global_avg_pool(maps)?;
        let tau = s.graph.constant(Tensor::scalar(cfg.tau));
        let total = proto_loss(&mut s.graph, pooled, &ys, &support, &query, cfg.way, tau)?;
        let loss = s.graph.scale(total, 1.0 / query.len() as f64);
        let value = s.graph.value(loss).item();
        s.backward(loss)?;
        let grads = s.param_grads();
        let updates = s.take_updates();
        drop(s);
        opt.step(&mut model.store, &params, &grads)?;
        model.store.apply_stat_updates(&updates);
        losses.push(value);
    }
    Ok(losses)
}

/// Fraction of images the trained base classifier labels correctly. Dense
/// mode averages per-location probabilities; otherwise the GAP embedding
/// is classified.
pub fn classifier_accuracy(model: &Model, images: &Tensor, labels: &[usize], dense: bool) -> Result<f64> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::State("model has no classifier".into()))?;
    let w = head.weights(&model.store);
    let tau = head.tau(&model.store);
    let maps = model.embed_maps(images)?;
    let mut correct = 0usize;
    for (fm, &y) in maps.iter().zip(labels) {
        let pred = if dense {
            let probs = dense_classify(fm, &w, tau)?;
            let mut avg = vec![0.0; w.classes()];
            for row in probs.rows() {
                avg.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            argmax(&avg)
        } else {
            argmax(&flat_classify(&pool_embedding(fm, Pooling::Gap), &w, tau)?)
        };
        correct += (pred == y) as usize;
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}
