//! Central finite differences, used to check analytic gradients.

/// Central difference of `f` with respect to every coordinate of `x`.
///
/// `f` is evaluated `2 * x.len()` times; `x` is restored before returning.
pub fn central_difference(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Mixed relative/absolute comparison: passes if either error is within its bound.
pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if diff <= abs_tol {
        return true;
    }
    let scale = analytic.abs().max(numeric.abs());
    diff / scale <= rel_tol
}

/// Largest violation over paired slices, as `(index, analytic, numeric)`.
pub fn first_mismatch(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Option<(usize, f64, f64)> {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| !grad_close(**a, **n, rel_tol, abs_tol))
        .map(|(i, (a, n))| (i, *a, *n))
}
