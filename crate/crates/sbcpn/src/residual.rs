//! Prox-gradient stationarity residual `G(x) = x - prox_g(x - grad f(x))`.
//!
//! `G(x) = 0` exactly at stationary points of the composite objective, and its
//! separability means a block restriction of `G` equals `G` of the restricted
//! problem, which is what lets block samplers score coordinates by `|G_i|`.

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

use crate::problem::{BlockIndexSet, CompositeProblem};
use crate::regularizer::RegularizerError;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Restriction(#[from] RegularizerError),
}

/// Full-space residual together with the summaries the driver and the block
/// samplers consume every iteration.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub g_full: Array1<f64>,
    pub norm: f64,
    pub per_coordinate_abs: Array1<f64>,
}

/// Computes `G(x)` given a precomputed gradient.
pub fn residual(
    problem: &CompositeProblem,
    x: &ArrayView1<f64>,
    grad: &ArrayView1<f64>,
) -> Result<ResidualReport, ResidualError> {
    let n = problem.dim();
    if x.len() != n {
        return Err(ResidualError::Dimension {
            expected: n,
            got: x.len(),
        });
    }
    if grad.len() != n {
        return Err(ResidualError::Dimension {
            expected: n,
            got: grad.len(),
        });
    }
    let shifted = x - grad;
    let prox = problem.reg.prox_full(&shifted.view(), 1.0);
    let g_full = x - &prox;
    let norm = g_full.dot(&g_full).sqrt();
    let per_coordinate_abs = g_full.mapv(f64::abs);
    Ok(ResidualReport {
        g_full,
        norm,
        per_coordinate_abs,
    })
}

/// Residual of the block-restricted problem, computed directly on the slice.
///
/// Equals the block slice of the full residual; grouped regularizers reject
/// blocks that split a group because the restricted prox would not separate.
pub fn residual_restricted(
    problem: &CompositeProblem,
    x: &ArrayView1<f64>,
    grad: &ArrayView1<f64>,
    block: &BlockIndexSet,
) -> Result<Array1<f64>, ResidualError> {
    let n = problem.dim();
    if x.len() != n {
        return Err(ResidualError::Dimension {
            expected: n,
            got: x.len(),
        });
    }
    let reg_slice = problem.reg.restrict(block)?;
    let xs = block.gather(x);
    let gs = block.gather(grad);
    let shifted = &xs - &gs;
    let prox = reg_slice.prox_full(&shifted.view(), 1.0);
    Ok(&xs - &prox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::QuadraticOracle;
    use crate::regularizer::SeparableRegularizer;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn l1_problem(target: Array1<f64>, lambda: f64) -> CompositeProblem {
        let n = target.len();
        CompositeProblem::new(
            Box::new(QuadraticOracle { target }),
            SeparableRegularizer::l1(n, lambda),
        )
        .unwrap()
    }

    #[test]
    fn residual_at_l1_example() {
        // f = 1/2 (x - 2)^2, g = |x|, x = 0: grad = -2, prox(2) = 1, G = -1.
        let p = l1_problem(array![2.0], 1.0);
        let x = array![0.0];
        let grad = p.smooth.gradient(&x.view());
        let rep = residual(&p, &x.view(), &grad.view()).unwrap();
        assert_eq!(rep.g_full, array![-1.0]);
        assert_eq!(rep.norm, 1.0);
        assert_eq!(rep.per_coordinate_abs, array![1.0]);
    }

    #[test]
    fn residual_zero_at_stationary_point() {
        // Minimizer of 1/2 (x-2)^2 + |x| is x = 1.
        let p = l1_problem(array![2.0], 1.0);
        let x = array![1.0];
        let grad = p.smooth.gradient(&x.view());
        let rep = residual(&p, &x.view(), &grad.view()).unwrap();
        assert!(rep.norm <= 1e-15);
    }

    #[test]
    fn restricted_residual_equals_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 12;
        for _ in 0..50 {
            let target = Array1::from_iter((0..n).map(|_| rng.random_range(-2.0..2.0)));
            let p = l1_problem(target, 0.3);
            let x = Array1::from_iter((0..n).map(|_| rng.random_range(-2.0..2.0)));
            let grad = p.smooth.gradient(&x.view());
            let rep = residual(&p, &x.view(), &grad.view()).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            idx.truncate(5);
            let block = BlockIndexSet::from_unsorted(idx, n).unwrap();
            let restricted = residual_restricted(&p, &x.view(), &grad.view(), &block).unwrap();
            let sliced = block.gather(&rep.g_full.view());
            for k in 0..block.len() {
                assert!((restricted[k] - sliced[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn grouped_restriction_requires_whole_groups() {
        let n = 6;
        let p = CompositeProblem::new(
            Box::new(QuadraticOracle {
                target: Array1::zeros(n),
            }),
            SeparableRegularizer::group_l2(n, 0.5, vec![0..3, 3..6]).unwrap(),
        )
        .unwrap();
        let x = array![1.0, -1.0, 2.0, 0.5, 0.0, -0.2];
        let grad = p.smooth.gradient(&x.view());
        let whole = BlockIndexSet::new(vec![3, 4, 5], n).unwrap();
        assert!(residual_restricted(&p, &x.view(), &grad.view(), &whole).is_ok());
        let split = BlockIndexSet::new(vec![2, 3], n).unwrap();
        assert!(residual_restricted(&p, &x.view(), &grad.view(), &split).is_err());
    }
}
