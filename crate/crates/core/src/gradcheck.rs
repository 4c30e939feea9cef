//! Finite-difference gradient oracle.
//!
//! Used by the test suites as ground truth for every backward rule. The
//! oracle only re-runs the supplied forward function and therefore stays
//! independent of the tape's backward implementation. Run it in 64-bit mode;
//! 32-bit storage loses too many digits for a tight tolerance.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central finite differences: grad_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_difference_grad<T, F>(f: &mut F, x: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let h = T::from_f64(step);
    let two_h = T::from_f64(2.0 * step);
    let mut probe = x.clone();
    let mut grad = vec![T::zero(); x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / two_h;
    }
    Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), grad))
}

/// `|a - b| <= abs_floor + rel_tol * max(|a|, |b|)` elementwise; returns the
/// worst offending (index, a, b) on failure.
pub fn grads_close<T: Scalar>(
    analytic: &[T],
    numeric: &[T],
    rel_tol: f64,
    abs_floor: f64,
) -> std::result::Result<(), (usize, f64, f64)> {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&a, &b)) in analytic.iter().zip(numeric).enumerate() {
        let (a, b) = (a.as_f64(), b.as_f64());
        let tol = abs_floor + rel_tol * a.abs().max(b.abs());
        let err = (a - b).abs();
        if err > tol {
            let excess = err / tol;
            if worst.map_or(true, |(_, _, _, w)| excess > w) {
                worst = Some((i, a, b, excess));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((i, a, b, _)) => Err((i, a, b)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_analytic() {
        // f(x) = sum(x^2), grad = 2x
        let x = Tensor::from_vec_unchecked(vec![3], vec![1.0f64, -2.0, 0.5]);
        let mut f = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v).sum());
        let g = finite_difference_grad(&mut f, &x, 1e-5).unwrap();
        let expected = [2.0, -4.0, 1.0];
        assert!(grads_close(g.data(), &expected, 1e-8, 1e-10).is_ok());
    }
}
