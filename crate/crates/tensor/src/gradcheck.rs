//! Central finite differences, the independent oracle for every analytic
//! gradient in the workspace.

use crate::{Float, Tensor};

/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_gradient<F: Float>(
    mut f: impl FnMut(&Tensor<F>) -> F,
    x: &Tensor<F>,
    eps: F,
) -> Tensor<F> {
    assert!(eps > F::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (F::c(2.0) * eps));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `|a − b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error<F: Float>(analytic: &Tensor<F>, numeric: &Tensor<F>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -2.0, 7.5]);
        let g = finite_diff_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_of_half_square_norm() {
        let x = Tensor::<f64>::from_vec(vec![3.0]);
        let g = finite_diff_gradient(|t| 0.5 * t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn floor_bounds_tiny_denominators() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-7).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
