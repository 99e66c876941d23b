use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the objective value and its analytic gradient at a point.
/// The result is the largest per-coordinate error
/// `|g_a - g_fd| / max(1, |g_a|, |g_fd|)`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_coords(f, point, step, 0..point.len())
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F, I>(f: F, point: &[f64], step: f64, coords: I) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    I: IntoIterator<Item = usize>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let (value, analytic) = f(point);
    if !value.is_finite() {
        return Err(Error::numerical("objective is not finite at the base point"));
    }
    if analytic.len() != point.len() {
        return Err(Error::usage(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let (plus, _) = f(&probe);
        probe[i] = orig - step;
        let (minus, _) = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numerical(format!(
                "objective is not finite when coordinate {i} is perturbed by {step}"
            )));
        }
        let fd = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = 1f64.max(a.abs()).max(fd.abs());
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}
