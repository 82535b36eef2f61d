use super::tensor::Tensor;

/// Denominator floor for the relative error so near-zero gradients are
/// compared on an absolute scale.
const REL_FLOOR: f64 = 1e-4;

/// Central-difference gradient check.
///
/// Returns the largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, analytic, h, &all)
}

/// Same as [`finite_diff_check`] restricted to the given flat coordinates.
pub fn finite_diff_check_at<F>(
    f: F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    coords: &[usize],
) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match input");
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Evenly spread sample of `count` coordinates out of `numel`.
pub fn spread_coords(numel: usize, count: usize) -> Vec<usize> {
    if count >= numel {
        return (0..numel).collect();
    }
    (0..count).map(|k| k * numel / count).collect()
}
