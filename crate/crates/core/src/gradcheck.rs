//! Central finite differences, the oracle for every backward rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(J(x + h e_i) - J(x - h e_i)) / 2h` for every coordinate `i` of `x`.
pub fn finite_diff_grad<F>(mut loss: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = loss(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = loss(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest elementwise `|a - n| / (|a| + 1e-8)`.
pub fn max_relative_error(autodiff: &Tensor, numeric: &Tensor) -> f64 {
    autodiff
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, DEFAULT_STEP).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let g = finite_diff_grad(|_| Ok(2.5), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.item()), &x, 0.0).is_err());
    }
}
