//! Central finite-difference helpers for checking hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Central-difference estimate of `d f / d x[i]`.
pub fn numeric_partial(x: &Tensor<f64>, i: usize, h: f64, f: &mut impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[i] += h;
    let mut xm = x.clone();
    xm.data_mut()[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares `analytic` with central differences of `f` at every element of
/// `x` and panics when the relative error reaches `tol`. Returns the error.
pub fn check_gradient(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    tol: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| numeric_partial(x, i, 1e-5, &mut f))
        .collect();
    let err = relative_error(analytic.data(), &numeric);
    assert!(err < tol, "gradient relative error {err:e} >= {tol:e}");
    err
}
