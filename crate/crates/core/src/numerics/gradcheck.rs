use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Default central-difference step for the given precision.
pub fn default_eps(precision: Precision) -> f64 {
    match precision {
        Precision::Double => 1e-5,
        Precision::Single => 1e-3,
    }
}

/// Central-difference estimate of the gradient of a scalar function.
///
/// Coordinate `i` of the result is `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`.
pub fn finite_difference_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    finite_difference_at(f, x, eps, 0..x.numel()).map(|g| {
        Tensor::from_raw(x.shape().to_vec(), g, Precision::Double)
    })
}

/// Central differences for the listed coordinates only.
pub fn finite_difference_at<F, I>(f: F, x: &Tensor, eps: f64, coords: I) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
    I: IntoIterator<Item = usize>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::new();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated to {plus} / {minus} at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}
