//! Numerical oracles used by the test suites: central finite differences and
//! a relative-error measure. These depend only on forward evaluation, never
//! on the tape's backward pass, so they stay independent of the code they
//! check.

/// Central-difference gradient of scalar function `f` at `x0`.
///
/// Each coordinate is perturbed by `eps` in both directions; the function is
/// re-evaluated from scratch, so any data-dependent choices inside `f`
/// (top-k masks, pooling argmaxes) are honestly recomputed.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Largest elementwise relative error between two gradient vectors.
///
/// The denominator is floored at 1e-3, which splits the comparison into two
/// regimes: gradients above 1e-3 are compared relatively, and smaller ones
/// absolutely at threshold `tol * 1e-3`. Central differences on an f64 loss
/// carry ~1e-10 of cancellation noise per coordinate, so near-zero gradients
/// can never pass a purely relative test; the absolute regime still flags
/// any disagreement orders of magnitude above that noise.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs())).max(1e-3))
        .fold(0.0, f64::max)
}
