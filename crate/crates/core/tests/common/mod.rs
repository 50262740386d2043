#![allow(dead_code)]

use densefew::rng::{stream, Purpose, Rng};
use densefew::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn rng(seed: u64, index: u64) -> Rng {
    stream(seed, Purpose::Eval, index)
}

pub fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
pub mod oracle;

/// Per-location loop over an `r × d` map and `c × d` weights:
/// `softmax_j(τ·cos(fiber_k, w_j))` written out directly.
pub fn dense_loop(map: &[f64], d: usize, weights: &[f64], c: usize, tau: f64) -> Vec<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    map.chunks(d)
        .map(|f| {
            let logits: Vec<f64> = (0..c)
                .map(|j| {
                    let wj = &weights[j * d..(j + 1) * d];
                    let dot: f64 = f.iter().zip(wj).map(|(a, b)| a * b).sum();
                    tau * dot / (norm(f) * norm(wj))
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Mean as the correctly rounded exact sum divided by the count, computed
/// in exact rational arithmetic.
pub fn exact_mean(values: &[f64]) -> f64 {
    use num_rational::BigRational;
    use num_traits::{ToPrimitive, Zero};
    let sum = values
        .iter()
        .map(|&v| BigRational::from_float(v).unwrap())
        .fold(BigRational::zero(), |a, b| a + b);
    sum.to_f64().unwrap() / values.len() as f64
}
