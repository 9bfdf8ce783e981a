//! Finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward path, so it stays independent
//! of every hand-written backward pass it is used to verify.

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let fp = f(&point);
        point[i] = orig - h;
        let fm = f(&point);
        point[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients, with a unit
/// floor in the denominator so near-zero components are compared absolutely
/// (central differences carry ~1e-10 absolute noise at h = 1e-6).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Default step for central differences on f64.
pub const FD_STEP: f64 = 1e-6;
