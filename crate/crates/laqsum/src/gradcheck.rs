//! Central finite-difference oracle for gradient verification.
//!
//! Deliberately independent of the tape's backward pass: it only evaluates
//! forward closures at perturbed inputs.

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between an analytic and a numeric gradient.
/// Entries where both magnitudes are below `floor` are ignored.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
