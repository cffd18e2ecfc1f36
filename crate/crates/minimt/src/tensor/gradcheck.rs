//! Central finite differences, the independent oracle for every adjoint.
//!
//! The estimate is computed entirely in 64-bit arithmetic and never touches
//! the reverse sweep: it only re-evaluates a caller-supplied scalar function
//! at perturbed inputs.

use super::Tensor;
use crate::error::Result;

/// Central-difference gradient `(f(x+h·e_i) − f(x−h·e_i)) / 2h` of a scalar
/// function, one coordinate at a time.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    let mut grad = vec![0.0f64; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst relative disagreement between an analytic gradient and its
/// finite-difference estimate: `max_i |a_i − n_i| / max(1, |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::<f64>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(
            &mut |t| Ok(t.data().iter().sum()),
            &x,
            1e-5,
        )
        .unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_of_square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference_gradient(
            &mut |t| Ok(t.data()[0] * t.data()[0]),
            &x,
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }
}
