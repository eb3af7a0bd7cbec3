//! Central-difference gradient estimates, the reference every analytic
//! gradient in this workspace is checked against.

use crate::error::{AdError, Result};
use crate::tensor::{Precision, Tensor};

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate of `x`.
pub fn finite_diff<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let values = finite_diff_coords(&mut f, x, eps, &coords)?;
    Tensor::new(x.shape().to_vec(), values, Precision::Double)
}

/// Central differences for a subset of flat coordinates.
pub fn finite_diff_coords<F>(mut f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(AdError::InvalidArgument {
            op: "finite_diff",
            detail: format!("step must be positive, got {eps}"),
        });
    }
    let mut probe = x.to_precision(Precision::Double);
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AdError::NonFinite(i));
            }
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
