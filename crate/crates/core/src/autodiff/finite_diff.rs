use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` of a
/// scalar function, one coordinate at a time.
///
/// Used as the independent oracle for every analytic gradient in the crate.
pub fn finite_diff_gradient<F>(mut f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain { op: "finite_diff", detail: format!("step {h} must be positive") });
    }
    let mut x = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = f(&x)?;
        x.data_mut()[i] = orig - h;
        let down = f(&x)?;
        x.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::numeric(format!("finite difference at coordinate {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error `|a - b| / max(|a|, |b|, 1e-3)`.
///
/// The floor keeps round-off noise of the finite-difference quotient from
/// dominating coordinates whose true gradient is essentially zero.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
