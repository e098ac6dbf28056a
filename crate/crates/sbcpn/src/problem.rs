//! Problem model: smooth oracles, restricted curvature operators, and the
//! composite objective `phi(x) = f(x) + g(x)` that the solvers minimize.

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::regularizer::SeparableRegularizer;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("block index set must not be empty")]
    EmptyBlock,
    #[error("block indices must be strictly increasing (got {prev} then {next})")]
    Unsorted { prev: usize, next: usize },
    #[error("block index {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },
}

/// A sorted, duplicate-free set of coordinate indices naming a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndexSet {
    indices: Vec<usize>,
    n: usize,
}

impl BlockIndexSet {
    /// Builds a block from indices that must already be strictly increasing
    /// and smaller than `n`.
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self, ProblemError> {
        if indices.is_empty() {
            return Err(ProblemError::EmptyBlock);
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(ProblemError::Unsorted {
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        let last = *indices.last().unwrap();
        if last >= n {
            return Err(ProblemError::IndexOutOfRange { index: last, n });
        }
        Ok(Self { indices, n })
    }

    /// Builds a block from indices in arbitrary order; sorts and rejects duplicates.
    pub fn from_unsorted(mut indices: Vec<usize>, n: usize) -> Result<Self, ProblemError> {
        indices.sort_unstable();
        Self::new(indices, n)
    }

    /// The full block `{0, .., n-1}`.
    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            n,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Ambient dimension the indices refer to.
    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.n
    }

    /// Gathers the block coordinates of a full-length vector.
    pub fn gather(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(self.indices.iter().map(|&i| x[i]))
    }

    /// Adds `alpha * v` (a block-length vector) into the block coordinates of `x`.
    pub fn scatter_add(&self, x: &mut Array1<f64>, v: &ArrayView1<f64>, alpha: f64) {
        for (k, &i) in self.indices.iter().enumerate() {
            x[i] += alpha * v[k];
        }
    }
}

/// Symmetric linear operator confined to a block, applied matrix-free.
///
/// Implementations may advertise analytic spectral metadata; callers fall back
/// to power-iteration estimates when it is absent.
pub trait BlockOperator {
    /// Block length the operator acts on.
    fn size(&self) -> usize;

    /// Computes `out = Q v`.
    fn apply_into(&self, v: &ArrayView1<f64>, out: &mut Array1<f64>);

    fn apply(&self, v: &ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.size());
        self.apply_into(v, &mut out);
        out
    }

    /// Analytic upper bound on the operator norm, when known.
    fn norm_bound(&self) -> Option<f64> {
        None
    }

    /// Analytic lower bound on the smallest eigenvalue, when known.
    fn eig_floor(&self) -> Option<f64> {
        None
    }
}

/// Dense symmetric operator; mostly useful for small blocks and tests.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub Array2<f64>);

impl BlockOperator for DenseOperator {
    fn size(&self) -> usize {
        self.0.nrows()
    }

    fn apply_into(&self, v: &ArrayView1<f64>, out: &mut Array1<f64>) {
        out.assign(&self.0.dot(v));
    }
}

/// Materializes a block operator as a dense matrix by applying it to basis
/// vectors. Guarded to modest sizes; it exists for direct solves and checks.
pub fn materialize(op: &dyn BlockOperator) -> Array2<f64> {
    let p = op.size();
    assert!(
        p <= 512,
        "dense materialization restricted to blocks of at most 512"
    );
    let mut dense = Array2::zeros((p, p));
    let mut e = Array1::zeros(p);
    let mut col = Array1::zeros(p);
    for j in 0..p {
        e[j] = 1.0;
        op.apply_into(&e.view(), &mut col);
        dense.column_mut(j).assign(&col);
        e[j] = 0.0;
    }
    dense
}

/// Smooth part of the objective: twice-differentiable, possibly nonconvex,
/// with coordinatewise Lipschitz gradient.
pub trait SmoothOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &ArrayView1<f64>) -> f64;

    fn gradient(&self, x: &ArrayView1<f64>) -> Array1<f64>;

    /// Curvature operator at `x` restricted to the block: `v -> (Q(x))_S v`.
    ///
    /// Applying this to `v` must equal the block restriction of the full
    /// operator applied to the zero-extension of `v`.
    fn restricted_curvature<'a>(
        &'a self,
        x: &ArrayView1<f64>,
        block: &BlockIndexSet,
    ) -> Box<dyn BlockOperator + 'a>;

    /// Uniform bound on blockwise gradient Lipschitz constants, when known.
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }

    /// Valid lower bound on the smallest eigenvalue of the full curvature
    /// operator at `x`, when one is analytically available.
    fn curvature_floor(&self, _x: &ArrayView1<f64>) -> Option<f64> {
        None
    }

    /// Smallest per-sample curvature weight at `x`, for oracles whose
    /// curvature is a weighted sum of rank-one terms. Drives the gated
    /// damping rule used by the robust group experiments.
    fn min_curvature_weight(&self, _x: &ArrayView1<f64>) -> Option<f64> {
        None
    }

    /// Uniform bound on `||hessian - Q||` when the curvature operator is an
    /// approximation; zero for exact-Hessian oracles.
    fn curvature_gap(&self) -> f64 {
        0.0
    }
}

/// `f + g` with `f` smooth and `g` separable convex.
pub struct CompositeProblem {
    pub smooth: Box<dyn SmoothOracle>,
    pub reg: SeparableRegularizer,
}

impl CompositeProblem {
    pub fn new(
        smooth: Box<dyn SmoothOracle>,
        reg: SeparableRegularizer,
    ) -> Result<Self, ProblemError> {
        if smooth.dim() != reg.dim() {
            return Err(ProblemError::Dimension {
                expected: smooth.dim(),
                got: reg.dim(),
            });
        }
        Ok(Self { smooth, reg })
    }

    pub fn dim(&self) -> usize {
        self.smooth.dim()
    }

    /// `phi(x) = f(x) + g(x)`.
    pub fn value(&self, x: &ArrayView1<f64>) -> f64 {
        self.smooth.eval(x) + self.reg.value(x)
    }
}

/// `phi(x)` as a free function, for call sites that only hold the parts.
pub fn composite_value(
    smooth: &dyn SmoothOracle,
    reg: &SeparableRegularizer,
    x: &ArrayView1<f64>,
) -> f64 {
    smooth.eval(x) + reg.value(x)
}

/// Worst relative mismatch between the oracle gradient and a central
/// finite-difference estimate:
/// `max_i |(f(x + h e_i) - f(x - h e_i)) / 2h - grad_i| / (1 + |grad_i|)`.
pub fn gradient_check(oracle: &dyn SmoothOracle, x: &ArrayView1<f64>, h: f64) -> f64 {
    let grad = oracle.gradient(x);
    let mut xp = x.to_owned();
    let mut worst = 0.0f64;
    for i in 0..oracle.dim() {
        let xi = xp[i];
        xp[i] = xi + h;
        let fp = oracle.eval(&xp.view());
        xp[i] = xi - h;
        let fm = oracle.eval(&xp.view());
        xp[i] = xi;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / (1.0 + grad[i].abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Reference oracle `f(x) = 1/2 ||x - a||^2`: identity curvature, gradient
/// `x - a`. Handy as the simplest exact-Hessian problem.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub target: Array1<f64>,
}

struct IdentityBlock {
    size: usize,
}

impl BlockOperator for IdentityBlock {
    fn size(&self) -> usize {
        self.size
    }

    fn apply_into(&self, v: &ArrayView1<f64>, out: &mut Array1<f64>) {
        out.assign(v);
    }

    fn norm_bound(&self) -> Option<f64> {
        Some(1.0)
    }

    fn eig_floor(&self) -> Option<f64> {
        Some(1.0)
    }
}

impl SmoothOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn eval(&self, x: &ArrayView1<f64>) -> f64 {
        let d = x - &self.target;
        0.5 * d.dot(&d)
    }

    fn gradient(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        x - &self.target
    }

    fn restricted_curvature<'a>(
        &'a self,
        _x: &ArrayView1<f64>,
        block: &BlockIndexSet,
    ) -> Box<dyn BlockOperator + 'a> {
        Box::new(IdentityBlock { size: block.len() })
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(1.0)
    }

    fn curvature_floor(&self, _x: &ArrayView1<f64>) -> Option<f64> {
        Some(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::SeparableRegularizer;
    use ndarray::array;

    #[test]
    fn block_index_set_rejects_bad_inputs() {
        assert!(matches!(
            BlockIndexSet::new(vec![], 4),
            Err(ProblemError::EmptyBlock)
        ));
        assert!(matches!(
            BlockIndexSet::new(vec![2, 1], 4),
            Err(ProblemError::Unsorted { .. })
        ));
        assert!(matches!(
            BlockIndexSet::new(vec![1, 1], 4),
            Err(ProblemError::Unsorted { .. })
        ));
        assert!(matches!(
            BlockIndexSet::new(vec![0, 4], 4),
            Err(ProblemError::IndexOutOfRange { index: 4, n: 4 })
        ));
        let b = BlockIndexSet::from_unsorted(vec![3, 0, 2], 5).unwrap();
        assert_eq!(b.indices(), &[0, 2, 3]);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let b = BlockIndexSet::new(vec![0, 2], 3).unwrap();
        let x = array![1.0, 2.0, 3.0];
        let v = b.gather(&x.view());
        assert_eq!(v, array![1.0, 3.0]);
        let mut y = x.clone();
        b.scatter_add(&mut y, &array![10.0, 20.0].view(), 0.5);
        assert_eq!(y, array![6.0, 2.0, 13.0]);
    }

    #[test]
    fn quadratic_oracle_gradient_check_small() {
        let oracle = QuadraticOracle {
            target: array![1.0, -2.0, 0.5],
        };
        let x = array![0.3, 0.1, -0.7];
        assert!(gradient_check(&oracle, &x.view(), 1e-6) < 1e-9);
    }

    #[test]
    fn composite_value_adds_regularizer() {
        let oracle = QuadraticOracle {
            target: array![0.0, 0.0],
        };
        let reg = SeparableRegularizer::l1(2, 1.0);
        let x = array![3.0, -4.0];
        // 1/2 (9 + 16) + (3 + 4)
        assert_eq!(composite_value(&oracle, &reg, &x.view()), 12.5 + 7.0);
    }

    #[test]
    fn materialize_matches_dense() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        let op = DenseOperator(m.clone());
        assert_eq!(materialize(&op), m);
    }
}
