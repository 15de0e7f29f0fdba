//! Central finite differences for checking tape gradients.

use crate::scalar::Scalar;

/// Denominator floor used by [`relative_error`]. Gradients smaller than this
/// are compared in absolute terms, where central-difference round-off
/// (about `eps_machine * |f| / h`) would otherwise dominate.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> f64 {
    let (a, n) = (analytic.as_f64(), numeric.as_f64());
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn central_difference<S: Scalar>(mut f: impl FnMut(&[S]) -> S, x: &[S], h: S) -> Vec<S> {
    let mut probe = x.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / two_h
        })
        .collect()
}
