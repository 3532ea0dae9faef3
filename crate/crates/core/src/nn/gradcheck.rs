use crate::tensor::Tensor;

/// Largest per-coordinate relative error between `analytic_grad` and central
/// differences of `f` at `point`, using `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    point: &Tensor<f64>,
    analytic_grad: &Tensor<f64>,
    step: f64,
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(point.shape(), analytic_grad.shape());
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let up = f(&probe);
        probe.data_mut()[i] = x - step;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic_grad.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
