//! SGD with Nesterov momentum, Adam and AdamW.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    SgdNesterov,
    Adam,
    AdamW,
}

impl FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_nesterov" => Ok(OptimKind::SgdNesterov),
            "adam" => Ok(OptimKind::Adam),
            "adamw" => Ok(OptimKind::AdamW),
            other => Err(Error::Argument(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    /// Momentum for SGD.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty for SGD and Adam; decoupled shrinkage for AdamW. Applied
    /// only to parameters flagged for decay.
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimKind::SgdNesterov,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            ..Self::sgd(lr, 0.0, weight_decay)
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimKind::AdamW,
            ..Self::sgd(lr, 0.0, weight_decay)
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    state: HashMap<ParamId, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            state: HashMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Update every trainable parameter in `params` from `grads`. Frozen
    /// parameters and buffers in `params` are skipped.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId], grads: &[(ParamId, Tensor)]) -> Result<()> {
        let by_id: HashMap<ParamId, &Tensor> = grads.iter().map(|(p, g)| (*p, g)).collect();
        let live: Vec<ParamId> = params.iter().copied().filter(|&p| store.is_trainable(p)).collect();
        for &p in &live {
            match by_id.get(&p) {
                None => {
                    return Err(Error::State(format!("no gradient for parameter {}", store.get(p).name)));
                }
                Some(g) if g.shape() != store.value(p).shape() => {
                    return Err(Error::shape("optimizer_step", store.value(p).shape(), g.shape()));
                }
                Some(_) => {}
            }
        }
        self.steps += 1;
        let c = self.config.clone();
        let t = self.steps as i32;
        for p in live {
            let g = by_id[&p].data();
            let param = store.get_mut(p);
            let decay = if param.decay { c.weight_decay } else { 0.0 };
            let m = self.state.entry(p).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            let w = param.value.data_mut();
            match c.kind {
                OptimKind::SgdNesterov => {
                    for i in 0..w.len() {
                        let gi = g[i] + decay * w[i];
                        m.first[i] = c.momentum * m.first[i] + gi;
                        w[i] -= c.lr * (gi + c.momentum * m.first[i]);
                    }
                }
                OptimKind::Adam | OptimKind::AdamW => {
                    let coupled = c.kind == OptimKind::Adam;
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for i in 0..w.len() {
                        let gi = if coupled { g[i] + decay * w[i] } else { g[i] };
                        m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * gi;
                        m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * gi * gi;
                        let mh = m.first[i] / bc1;
                        let vh = m.second[i] / bc2;
                        if !coupled {
                            w[i] -= c.lr * decay * w[i];
                        }
                        w[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
