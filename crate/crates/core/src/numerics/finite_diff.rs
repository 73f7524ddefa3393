use super::tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Independent of the tape: this is the reference the autodiff results are
/// checked against.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

pub const DEFAULT_STEP: f64 = 1e-6;

/// Largest `|a - b| / max(1, |b|)` over all coordinates, `b` being the reference.
pub fn max_relative_error(autodiff: &Tensor, reference: &Tensor) -> f64 {
    autodiff
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| libm::fabs(a - b) / libm::fabs(*b).max(1.0))
        .fold(0.0, f64::max)
}
