//! Implants: extra convolution kernels grown beside the frozen top layers
//! of a trained network and fitted on a novel task's support set with
//! leave-one-out subtasks.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fewshot::losses::{dense_proto_loss, proto_loss};
use crate::graph::Var;
use crate::models::{ArchKind, ArchitectureConfig, Model};
use crate::nn::{ConvUnit, ParamId, ParamStore, Session};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Which conv layers receive implants (`first_layer..` through the last)
/// and how many channels each implant adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImplantSpec {
    pub first_layer: usize,
    pub channels: usize,
}

impl ImplantSpec {
    /// Implants on every conv layer of the last block.
    pub fn last_block(config: &ArchitectureConfig, channels: usize) -> Self {
        let per_block = match config.kind {
            ArchKind::ResNet12 => 3,
            ArchKind::C128F => 1,
        };
        ImplantSpec {
            first_layer: config.num_layers() - per_block,
            channels,
        }
    }

    pub fn layers(&self, config: &ArchitectureConfig) -> std::ops::Range<usize> {
        self.first_layer..config.num_layers()
    }

    pub fn validate(&self, config: &ArchitectureConfig) -> Result<()> {
        if self.first_layer > config.num_layers() {
            return Err(Error::Argument(format!(
                "implant layer {} out of range for {} conv layers",
                self.first_layer,
                config.num_layers()
            )));
        }
        if self.channels == 0 {
            return Err(Error::Argument("implants need at least one channel".into()));
        }
        Ok(())
    }
}

/// The implant units, one per implanted conv layer.
#[derive(Debug, Clone)]
pub struct ImplantStream {
    pub spec: ImplantSpec,
    units: Vec<ConvUnit>,
}

impl ImplantStream {
    pub fn new(store: &mut ParamStore, config: &ArchitectureConfig, spec: ImplantSpec, seed: u64) -> Result<Self> {
        spec.validate(config)?;
        let mut rng = stream(seed, Purpose::Implants, 0);
        let units = spec
            .layers(config)
            .enumerate()
            .map(|(i, l)| {
                let (base_in, _) = config.layer_channels(l);
                let c_in = base_in + if i > 0 { spec.channels } else { 0 };
                ConvUnit::new(
                    store,
                    &format!("implant.layer{l}"),
                    3,
                    c_in,
                    spec.channels,
                    true,
                    &mut rng,
                )
            })
            .collect();
        Ok(ImplantStream { spec, units })
    }

    /// Channels the stream appends to the embedding.
    pub fn out_channels(&self) -> usize {
        if self.units.is_empty() {
            0
        } else {
            self.spec.channels
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.units.iter().flat_map(|u| u.param_ids()).collect()
    }

    /// Run the implants on the base taps (inputs of the implanted layers)
    /// and append their output to the base feature map.
    pub fn forward(&self, s: &mut Session, config: &ArchitectureConfig, taps: &[Var], base_output: Var) -> Result<Var> {
        if taps.len() != self.units.len() {
            return Err(Error::State(format!(
                "implant stream expects {} taps, got {}",
                self.units.len(),
                taps.len()
            )));
        }
        let mut prev: Option<Var> = None;
        for ((l, unit), &tap) in self.spec.layers(config).zip(&self.units).zip(taps) {
            let input = match prev {
                Some(p) => s.graph.concat(tap, p)?,
                None => tap,
            };
            let mut y = unit.forward(s, input)?;
            if config.ends_block(l) {
                y = s.graph.max_pool2(y)?;
            }
            prev = Some(y);
        }
        match prev {
            Some(p) => s.graph.concat(base_output, p),
            None => Ok(base_output),
        }
    }
}

/// Grow implants on a model, freezing everything it already owns.
pub fn widen(model: &mut Model, spec: ImplantSpec) -> Result<()> {
    if model.implant.is_some() {
        return Err(Error::State("model is already widened".into()));
    }
    spec.validate(model.config())?;
    let all: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    model.store.freeze(&all);
    let config = model.config().clone();
    model.implant = Some(ImplantStream::new(&mut model.store, &config, spec, model.seed)?);
    Ok(())
}

/// One leave-one-out subtask: a single query, every other support example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtask {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// The `n′` subtasks `Q_i = {i}`, `S_i = [n′] \ {i}`. Needs two or more
/// supports per class.
pub fn loo_subtasks(labels: &[usize], classes: usize) -> Result<Vec<Subtask>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Index(format!("label {y} out of range for {classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c < 2) {
        return Err(Error::Unsupported(format!(
            "leave-one-out training needs at least 2 shots per class; class {j} has {}",
            counts[j]
        )));
    }
    let n = labels.len();
    Ok((0..n)
        .map(|i| Subtask {
            support: (0..n).filter(|&j| j != i).collect(),
            query: vec![i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImplantLoss {
    Pooled,
    Dense,
}

impl FromStr for ImplantLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(ImplantLoss::Pooled),
            "dense" => Ok(ImplantLoss::Dense),
            other => Err(Error::Argument(format!("unknown implant loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplantConfig {
    pub channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub loss: ImplantLoss,
}

impl Default for ImplantConfig {
    fn default() -> Self {
        ImplantConfig {
            channels: 16,
            epochs: 50,
            lr: 1e-3,
            weight_decay: 5e-4,
            tau: 10.0,
            loss: ImplantLoss::Pooled,
        }
    }
}

/// Base-stream activations of a fixed image set. The base is frozen during
/// implant training, so these never change and are computed once.
#[derive(Debug, Clone)]
pub struct BaseCache {
    pub taps: Vec<Tensor>,
    pub output: Tensor,
}

impl BaseCache {
    pub fn new(model: &Model, images: &Tensor, first_layer: usize) -> Result<Self> {
        let mut s = Session::new(&model.store, false);
        let x = s.graph.constant(images.clone());
        let fwd = model.net.forward(&mut s, x, first_layer)?;
        Ok(BaseCache {
            taps: fwd.taps.iter().map(|&t| s.graph.value(t).clone()).collect(),
            output: s.graph.value(fwd.output).clone(),
        })
    }
}

/// Fit the implants of a widened model on a support set. Returns the mean
/// subtask loss of every epoch. The scale stays fixed at `config.tau`.
pub fn train_implants(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    config: &ImplantConfig,
) -> Result<Vec<f64>> {
    let subtasks = loo_subtasks(labels, classes)?;
    let stream_ = model
        .implant
        .clone()
        .ok_or_else(|| Error::State("model has no implants to train".into()))?;
    let cache = BaseCache::new(model, images, stream_.spec.first_layer)?;
    let params = stream_.param_ids();
    let mut opt = Optimizer::new(OptimConfig::adamw(config.lr, config.weight_decay));
    let net_config = model.config().clone();
    let mut curve = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for task in &subtasks {
            let mut s = Session::new(&model.store, true);
            let taps: Vec<Var> = cache.taps.iter().map(|t| s.graph.constant(t.clone())).collect();
            let base = s.graph.constant(cache.output.clone());
            let maps = stream_.forward(&mut s, &net_config, &taps, base)?;
            let tau = s.graph.constant(Tensor::scalar(config.tau));
            let loss = match config.loss {
                ImplantLoss::Pooled => {
                    let pooled = s.graph.global_avg_pool(maps)?;
                    proto_loss(&mut s.graph, pooled, labels, &task.support, &task.query, classes, tau)?
                }
                ImplantLoss::Dense => {
                    dense_proto_loss(&mut s.graph, maps, labels, &task.support, &task.query, classes, tau)?
                }
            };
            total += s.graph.value(loss).item();
            s.backward(loss)?;
            let grads = s.param_grads();
            let updates = s.take_updates();
            drop(s);
            opt.step(&mut model.store, &params, &grads)?;
            model.store.apply_stat_updates(&updates);
        }
        curve.push(total / subtasks.len() as f64);
    }
    Ok(curve)
}
