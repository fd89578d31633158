use super::tensor::{Element, Tensor};

/// Central-difference gradient of `f` at `theta`, one coordinate at a time:
/// `(f(θ + ε e_i) - f(θ - ε e_i)) / 2ε`.
pub fn finite_difference_grad<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    theta: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = theta.clone();
    let mut grad = Tensor::zeros(theta.shape());
    for i in 0..theta.numel() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
        let plus = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = T::from_f64((plus - minus) / (2.0 * eps));
    }
    grad
}

/// `max_i |a_i - b_i| / max_i |b_i|`: error relative to the reference's scale.
pub fn max_relative_error<A: Element, B: Element>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    let scale = b.max_abs();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
