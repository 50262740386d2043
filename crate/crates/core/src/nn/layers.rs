use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{sigmoid, Var};
use crate::nn::params::{ParamId, ParamKind, ParamStore, Session, StatUpdate};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Convolution with a `kh x kw x c_in x c_out` kernel and no bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialization: `N(0, 2 / fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..kernel * kernel * c_in * c_out)
            .map(|_| normal.sample(rng))
            .collect();
        let w = Tensor::new(vec![kernel, kernel, c_in, c_out], data).expect("shape");
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight, true);
        Conv2d { weight, stride, pad }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.graph.conv2d(x, w, self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[3]
    }
}

/// Per-channel batch normalization over the last axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Weight,
                false,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Weight,
                false,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
                false,
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// A frozen layer always runs on its running statistics, even when the
    /// session is training other parameters.
    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.get(self.gamma).frozen
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.training() && !self.is_frozen(s.store()) {
            let (y, stats) = s.graph.batch_norm_train(x, gamma, beta, self.eps)?;
            s.push_update(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                stats,
            });
            Ok(y)
        } else {
            let store = s.store();
            let mean = store.value(self.running_mean).data();
            let var = store.value(self.running_var).data();
            s.graph.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Swish-1 on a single value.
pub fn swish1(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Swish-1 applied elementwise inside a graph.
pub fn swish1_var(s: &mut Session, x: Var) -> Var {
    s.graph.swish(x)
}

/// Conv → batch norm → optional swish-1: the unit every block is built from.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub activate: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        activate: bool,
        rng: &mut Rng,
    ) -> Self {
        let pad = kernel / 2;
        ConvUnit {
            conv: Conv2d::new(store, &format!("{name}.conv"), kernel, c_in, c_out, 1, pad, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
            activate,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(if self.activate { swish1_var(s, y) } else { y })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv.weight];
        v.extend(self.bn.param_ids());
        v
    }
}
