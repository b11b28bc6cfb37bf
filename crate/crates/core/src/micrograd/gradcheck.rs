use super::Tensor;

/// Compares analytic gradients against central differences.
///
/// `eval` maps a parameter set to `(loss, d loss / d params)`. Every element of
/// every parameter tensor is perturbed by `±epsilon`. Returns the maximum over
/// elements of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(params: &[Tensor<f64>], mut eval: F, epsilon: f64) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
{
    let (_, analytic) = eval(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter tensor");
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..work[pi].len() {
            let original = work[pi].data()[ei];
            work[pi].data_mut()[ei] = original + epsilon;
            let (plus, _) = eval(&work);
            work[pi].data_mut()[ei] = original - epsilon;
            let (minus, _) = eval(&work);
            work[pi].data_mut()[ei] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}
