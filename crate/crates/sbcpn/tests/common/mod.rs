//! Brute-force reference computations the acceptance tests compare against.

use ndarray::{Array1, Array2, ArrayView1};
use sbcpn::SmoothOracle;

/// Minimizer of a convex scalar function over `[lo, hi]` by ternary search,
/// shrinking the bracket to floating-point resolution.
pub fn ternary_min(h: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > 1e-12 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if h(m1) < h(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    0.5 * (lo + hi)
}

/// Central finite-difference Hessian assembled column by column from the
/// oracle gradient.
pub fn fd_hessian(oracle: &dyn SmoothOracle, x: &ArrayView1<f64>, h: f64) -> Array2<f64> {
    let n = oracle.dim();
    let mut out = Array2::zeros((n, n));
    let mut xp = x.to_owned();
    for j in 0..n {
        let xj = xp[j];
        xp[j] = xj + h;
        let gp = oracle.gradient(&xp.view());
        xp[j] = xj - h;
        let gm = oracle.gradient(&xp.view());
        xp[j] = xj;
        let col = (&gp - &gm) / (2.0 * h);
        out.column_mut(j).assign(&col);
    }
    out
}

/// Uniform random vector in `(lo, hi)^n`.
pub fn uniform_vec(rng: &mut impl rand::Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(lo..hi))
}
