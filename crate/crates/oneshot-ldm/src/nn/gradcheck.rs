//! Numeric differentiation helpers.
//!
//! These provide an implementation-independent oracle for checking the
//! hand-written backward passes and the forward-mode decoder derivative:
//! central differences of a scalar loss or of a full map along a
//! direction.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::<f64>::zeros(x.raw_dim());
    let mut xp = x.clone();
    for (idx, slot) in g.indexed_iter_mut() {
        let orig = xp[&idx];
        xp[&idx] = orig + h;
        let fp = f(&xp);
        xp[&idx] = orig - h;
        let fm = f(&xp);
        xp[&idx] = orig;
        *slot = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference directional derivative of a vector-valued function:
/// `(f(x + h v) - f(x - h v)) / (2 h)`.
pub fn central_diff_jvp<F>(mut f: F, x: &ArrayD<f64>, v: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> ArrayD<f64>,
{
    let xp = x + &(v * h);
    let xm = x - &(v * h);
    let fp = f(&xp);
    let fm = f(&xm);
    (&fp - &fm) / (2.0 * h)
}

/// Largest absolute element-wise difference between two tensors.
pub fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    let mut worst = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        worst = worst.max((x - y).abs());
    });
    worst
}

/// Largest element-wise difference scaled by `max(1, |a|, |b|)`.
pub fn max_rel_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    let mut worst = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let scale = 1.0f64.max(x.abs()).max(y.abs());
        worst = worst.max((x - y).abs() / scale);
    });
    worst
}
