//! Central finite differences for verifying analytic gradients.

use ndarray::Array2;

/// Central-difference gradient of a scalar function w.r.t. one matrix.
pub fn finite_diff<F>(at: &Array2<f64>, step: f64, mut f: F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(at.raw_dim());
    let mut probe = at.clone();
    for idx in 0..at.len() {
        let (r, c) = (idx / at.ncols(), idx % at.ncols());
        let orig = probe[(r, c)];
        probe[(r, c)] = orig + step;
        let fp = f(&probe);
        probe[(r, c)] = orig - step;
        let fm = f(&probe);
        probe[(r, c)] = orig;
        grad[(r, c)] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst relative error between two gradients, with an absolute floor so
/// near-zero entries compare on absolute terms.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
