//! Inexact proximal Newton solver with stochastic block-coordinate updates.
//!
//! The solver minimizes `phi(x) = f(x) + g(x)` where `f` is smooth (possibly
//! nonconvex) and `g` is separable and convex. Each iteration samples a block
//! of coordinates, builds a damped quadratic model of `f` restricted to the
//! block, solves the regularized model inexactly under a certificate that ties
//! the subgradient residual to the step length, and advances by a line search,
//! a unit step, or the variable-metric baseline scheme.
//!
//! Layout:
//! - [`problem`]: oracles, blocks, and the composite objective
//! - [`regularizer`]: separable convex terms and their proximal maps
//! - [`residual`]: the prox-gradient stationarity measure
//! - [`sampling`]: block selection strategies behind a common trait
//! - [`subproblem`]: restricted models, inner solvers, damping policies
//! - [`driver`]: outer loops and traces

pub mod driver;
pub mod experiments;
pub mod problem;
pub mod regularizer;
pub mod residual;
pub mod sampling;
pub mod subproblem;

pub use driver::{
    run_alg1, run_alg2, run_vm, solve, solve_from, unit_space_for, AlgorithmKind, EtaRule,
    IterationRecord, RunStatus, SolveTrace, SolverConfig, SolverError,
};
pub use problem::{gradient_check, BlockIndexSet, BlockOperator, CompositeProblem, SmoothOracle};
pub use regularizer::SeparableRegularizer;
pub use residual::{residual, residual_restricted, ResidualReport};
pub use sampling::{build_sampler, BlockSampler, UnitSpace, STRATEGY_NAMES};
