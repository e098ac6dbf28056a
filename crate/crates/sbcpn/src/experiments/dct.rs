//! Orthonormal DCT-II, applied directly in O(N^2). Fast transforms are out of
//! scope at the instance sizes used here.

use ndarray::{Array1, ArrayView1};
use std::f64::consts::PI;

/// Entry (k, j) of the N-point orthonormal DCT-II matrix.
pub fn dct2_entry(n: usize, k: usize, j: usize) -> f64 {
    let scale = if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    };
    scale * (PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64).cos()
}

pub fn dct2_apply(x: &ArrayView1<f64>) -> Array1<f64> {
    let n = x.len();
    Array1::from_shape_fn(n, |k| (0..n).map(|j| dct2_entry(n, k, j) * x[j]).sum())
}

pub fn dct2_adjoint(y: &ArrayView1<f64>) -> Array1<f64> {
    let n = y.len();
    Array1::from_shape_fn(n, |j| (0..n).map(|k| dct2_entry(n, k, j) * y[k]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_transform() {
        let y = dct2_apply(&array![1.0, 1.0].view());
        assert!((y[0] - 2f64.sqrt()).abs() <= 1e-12);
        assert!(y[1].abs() <= 1e-12);
    }

    #[test]
    fn preserves_norms_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 7, 32] {
            let x = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
            let y = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
            let tx = dct2_apply(&x.view());
            assert!((tx.dot(&tx).sqrt() - x.dot(&x).sqrt()).abs() <= 1e-10);
            let lhs = tx.dot(&y);
            let rhs = x.dot(&dct2_adjoint(&y.view()));
            assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn adjoint_inverts_on_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array1::from_shape_fn(16, |_| rng.random_range(-2.0..2.0));
        let back = dct2_adjoint(&dct2_apply(&x.view()).view());
        for i in 0..16 {
            assert!((back[i] - x[i]).abs() <= 1e-10);
        }
    }
}
