//! Central finite-difference gradient checking.
//!
//! Kept in the library (rather than test-only code) so integration suites
//! and downstream experiments can verify analytic gradients the same way.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x`, evaluated only at the given
/// flat coordinates. The step is scaled per coordinate: `h·max(1, |x_i|)`.
pub fn numeric_gradient<F>(f: &F, x: &ArrayD<f64>, coords: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.as_slice().unwrap()[c];
        let step = h * orig.abs().max(1.0);
        probe.as_slice_mut().unwrap()[c] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[c] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[c] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    out
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Convenience: checks sampled coordinates of an analytic gradient against
/// central differences; returns the worst relative error.
pub fn max_rel_err_at<F>(
    f: &F,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    coords: &[usize],
    h: f64,
) -> f64
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let numeric = numeric_gradient(f, x, coords, h);
    let a = analytic.as_slice().expect("standard layout");
    coords
        .iter()
        .zip(&numeric)
        .map(|(&c, &n)| rel_err(a[c], n))
        .fold(0.0, f64::max)
}

/// Evenly spaced sample of `k` flat coordinates for an array of `len`.
pub fn sample_coords(len: usize, k: usize) -> Vec<usize> {
    let k = k.min(len).max(1);
    (0..k).map(|i| i * len / k).collect()
}
