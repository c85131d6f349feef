//! Finite-difference gradient checking utilities.
//!
//! Central differences with a caller-chosen step; deviations are reported
//! relative to the largest gradient magnitude so near-zero components do not
//! blow up the ratio.

use ndarray::ArrayD;

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad<F>(f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// max_i |a_i - n_i| / max(||a||_inf, ||n||_inf, floor), optionally skipping
/// masked-out components.
pub fn max_relative_deviation(
    analytic: &ArrayD<f64>,
    numeric: &ArrayD<f64>,
    skip: Option<&[bool]>,
) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let a = analytic.as_slice().unwrap();
    let n = numeric.as_slice().unwrap();
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        if let Some(s) = skip {
            if s[i] {
                continue;
            }
        }
        scale = scale.max(a[i].abs()).max(n[i].abs());
    }
    let denom = scale.max(1e-12);
    for i in 0..a.len() {
        if let Some(s) = skip {
            if s[i] {
                continue;
            }
        }
        worst = worst.max((a[i] - n[i]).abs() / denom);
    }
    worst
}
