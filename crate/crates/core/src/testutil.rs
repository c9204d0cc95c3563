//! Finite-difference helpers shared by unit tests.

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// `|a − n| / (|n| + 1e-8) < tol`.
pub fn assert_grad_close(analytic: f64, numeric: f64, tol: f64, what: &str) {
    let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
    assert!(rel < tol, "{what}: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})");
}
