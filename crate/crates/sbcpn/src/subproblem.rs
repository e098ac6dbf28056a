//! Restricted quadratic subproblems and their inexact inner solvers.
//!
//! Each outer iteration minimizes, over the sampled block,
//!
//! ```text
//! q(y) = f_base + <grad, y - base> + 1/2 <Q (y - base), y - base>
//!        + eta/2 ||y - base||^2 + g(y)
//! ```
//!
//! approximately: the inner solver stops once it can exhibit a subgradient
//! `s` of `q` at the candidate with `||s|| <= (mu/2) ||y - base||`. That
//! certificate is what the outer convergence analysis consumes, so inner
//! solvers never return an uncertified point.

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

use crate::problem::{BlockIndexSet, BlockOperator, SmoothOracle};
use crate::regularizer::{RegularizerError, SeparableRegularizer};

#[derive(Debug, Error)]
pub enum SubproblemError {
    #[error("inner solver exhausted {iterations} iterations; last certificate {certificate_norm:.3e} > threshold {threshold:.3e}")]
    InnerExhausted {
        iterations: usize,
        certificate_norm: f64,
        threshold: f64,
    },
    #[error("conjugate gradient met nonpositive curvature at iteration {iteration}; system is not positive definite")]
    IndefiniteSystem { iteration: usize },
    #[error("damping {eta:.6e} exceeds its admissible bound {eta_bar:.6e}")]
    EtaExceedsBar { eta: f64, eta_bar: f64 },
    #[error("policy needs a gradient Lipschitz bound the oracle does not provide")]
    NeedsLipschitz,
    #[error(transparent)]
    Restriction(#[from] RegularizerError),
}

/// The block-restricted model built at one outer iterate.
pub struct RestrictedQuadraticModel<'a> {
    pub f_base: f64,
    pub grad_slice: Array1<f64>,
    pub q_op: Box<dyn BlockOperator + 'a>,
    pub eta: f64,
    pub base: Array1<f64>,
    pub reg_slice: SeparableRegularizer,
}

impl<'a> RestrictedQuadraticModel<'a> {
    pub fn size(&self) -> usize {
        self.base.len()
    }

    /// `q(y)`.
    pub fn value(&self, y: &ArrayView1<f64>) -> f64 {
        let d = y - &self.base;
        let qd = self.q_op.apply(&d.view());
        self.f_base
            + self.grad_slice.dot(&d)
            + 0.5 * qd.dot(&d)
            + 0.5 * self.eta * d.dot(&d)
            + self.reg_slice.value(y)
    }

    /// Gradient of the smooth part of `q` at `y`.
    pub fn smooth_grad(&self, y: &ArrayView1<f64>) -> Array1<f64> {
        let d = y - &self.base;
        let mut g = self.q_op.apply(&d.view());
        g.scaled_add(self.eta, &d);
        g += &self.grad_slice;
        g
    }
}

/// Assembles the model for a block: gathers the gradient and base slices,
/// restricts the regularizer, and captures the curvature operator.
pub fn build_model<'a>(
    smooth: &'a dyn SmoothOracle,
    reg: &SeparableRegularizer,
    x: &ArrayView1<f64>,
    grad: &ArrayView1<f64>,
    block: &BlockIndexSet,
    eta: f64,
    f_base: f64,
) -> Result<RestrictedQuadraticModel<'a>, SubproblemError> {
    let reg_slice = reg.restrict(block)?;
    Ok(RestrictedQuadraticModel {
        f_base,
        grad_slice: block.gather(grad),
        q_op: smooth.restricted_curvature(x, block),
        eta,
        base: block.gather(x),
        reg_slice,
    })
}

/// When the inner solver may stop: certificate below a fixed fraction of the
/// step length (the outer algorithms), or below an absolute tolerance
/// (effectively exact solves, used by reduction tests and references).
#[derive(Debug, Clone, Copy)]
pub enum InnerCriterion {
    StepFraction(f64),
    Absolute(f64),
}

impl InnerCriterion {
    fn threshold(&self, step_norm: f64) -> f64 {
        match self {
            InnerCriterion::StepFraction(mu) => 0.5 * mu * step_norm,
            InnerCriterion::Absolute(tol) => *tol,
        }
    }
}

/// A certified inner solution.
#[derive(Debug, Clone)]
pub struct InexactSolution {
    pub y_hat: Array1<f64>,
    /// `||y_hat - base||`.
    pub step_norm: f64,
    /// Norm of the exhibited subgradient of the model at `y_hat`.
    pub certificate_norm: f64,
    pub inner_iterations: usize,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

// Deterministic pseudo-random unit vector so spectral estimates are
// reproducible bit-for-bit across runs and platforms.
fn det_unit_vector(p: usize) -> Array1<f64> {
    let mut state = 0x9e3779b97f4a7c15u64 ^ (p as u64).wrapping_mul(0xbf58476d1ce4e5b9);
    let mut v = Array1::zeros(p);
    for i in 0..p {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        v[i] = (z as f64 / u64::MAX as f64) * 2.0 - 1.0;
    }
    let nv = norm(&v);
    if nv > 0.0 {
        v /= nv;
    } else {
        v[0] = 1.0;
    }
    v
}

/// Power-iteration estimate of the operator norm (largest eigenvalue
/// magnitude). Underestimates, so callers add a safety factor when the value
/// guards a step size.
pub fn op_norm_estimate(op: &dyn BlockOperator, iters: usize) -> f64 {
    let p = op.size();
    let mut v = det_unit_vector(p);
    let mut best = 0.0f64;
    let mut w = Array1::zeros(p);
    for _ in 0..iters {
        op.apply_into(&v.view(), &mut w);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        best = best.max(nw);
        v.assign(&w);
        v /= nw;
    }
    best
}

/// Estimated lower bound on the smallest eigenvalue via a shifted power
/// iteration: the dominant eigenvalue of `s I - Q` is `s - lambda_min(Q)`.
///
/// Returns the estimate only when the iteration converged (relative residual
/// of the shifted eigenpair at most 2%, where the Rayleigh quotient is
/// accurate to second order); the 2% deflation then biases the result low,
/// toward a valid floor. An unconverged run yields `None` because its
/// Rayleigh quotient can land anywhere inside the spectrum, which would
/// overestimate the floor.
pub fn eig_floor_estimate(op: &dyn BlockOperator, iters: usize) -> Option<f64> {
    let p = op.size();
    let s = 1.05 * op_norm_estimate(op, iters) + 1e-12;
    let mut v = det_unit_vector(p);
    let mut w = Array1::zeros(p);
    let mut rayleigh = 0.0f64;
    let mut resid = f64::INFINITY;
    for _ in 0..iters {
        op.apply_into(&v.view(), &mut w);
        w.zip_mut_with(&v, |wi, &vi| *wi = s * vi - *wi);
        rayleigh = v.dot(&w);
        let r = &w - &(rayleigh * &v);
        resid = norm(&r);
        let nw = norm(&w);
        if nw == 0.0 {
            return Some(s);
        }
        v.assign(&w);
        v /= nw;
    }
    if rayleigh > 0.0 && resid <= 0.02 * rayleigh {
        Some(s - 1.02 * rayleigh)
    } else {
        None
    }
}

/// Proximal-gradient inner solver. One curvature apply per iteration; the
/// certificate is exactly the prox-step fixed-point residual
/// `(y - y+)/t + grad_s(y+) - grad_s(y)`, a subgradient of `q` at `y+`.
pub fn prox_grad_inner(
    model: &RestrictedQuadraticModel,
    criterion: InnerCriterion,
    max_inner: usize,
) -> Result<InexactSolution, SubproblemError> {
    let op_norm = match model.q_op.norm_bound() {
        Some(b) => b,
        None => 1.05 * op_norm_estimate(&*model.q_op, 20),
    };
    let t = 1.0 / (op_norm + model.eta);
    let mut y = model.base.clone();
    let mut gy = model.grad_slice.clone();
    let mut last_cert = f64::INFINITY;
    let mut last_threshold = 0.0;
    for j in 1..=max_inner {
        let u = &y - &(t * &gy);
        let y_next = model.reg_slice.prox_full(&u.view(), t);
        let gy_next = model.smooth_grad(&y_next.view());
        let cert_vec = (&y - &y_next) / t + &gy_next - &gy;
        let certificate_norm = norm(&cert_vec);
        let step = &y_next - &model.base;
        let step_norm = norm(&step);
        y = y_next;
        gy = gy_next;
        let threshold = criterion.threshold(step_norm);
        if certificate_norm <= threshold {
            return Ok(InexactSolution {
                y_hat: y,
                step_norm,
                certificate_norm,
                inner_iterations: j,
            });
        }
        last_cert = certificate_norm;
        last_threshold = threshold;
    }
    Err(SubproblemError::InnerExhausted {
        iterations: max_inner,
        certificate_norm: last_cert,
        threshold: last_threshold,
    })
}

/// Conjugate-gradient inner solver for blocks whose regularizer slice is
/// zero: solves `(Q + eta I) d = -grad` and certifies with the plain linear
/// residual, which is the model gradient at `base + d`.
pub fn cg_inner(
    model: &RestrictedQuadraticModel,
    criterion: InnerCriterion,
    max_inner: usize,
) -> Result<InexactSolution, SubproblemError> {
    assert!(
        model.reg_slice.is_zero(),
        "cg_inner applies only to blocks with a zero regularizer slice"
    );
    let p = model.size();
    let mut delta: Array1<f64> = Array1::zeros(p);
    let mut r = -&model.grad_slice;
    let mut rr = r.dot(&r);
    if rr.sqrt() <= criterion.threshold(0.0) {
        return Ok(InexactSolution {
            y_hat: model.base.clone(),
            step_norm: 0.0,
            certificate_norm: rr.sqrt(),
            inner_iterations: 0,
        });
    }
    let mut pdir = r.clone();
    let mut hp = Array1::zeros(p);
    for j in 1..=max_inner {
        model.q_op.apply_into(&pdir.view(), &mut hp);
        hp.scaled_add(model.eta, &pdir);
        let php = pdir.dot(&hp);
        if php <= 0.0 {
            return Err(SubproblemError::IndefiniteSystem { iteration: j });
        }
        let alpha = rr / php;
        delta.scaled_add(alpha, &pdir);
        r.scaled_add(-alpha, &hp);
        let rr_next = r.dot(&r);
        let certificate_norm = rr_next.sqrt();
        let step_norm = norm(&delta);
        if certificate_norm <= criterion.threshold(step_norm) {
            return Ok(InexactSolution {
                y_hat: &model.base + &delta,
                step_norm,
                certificate_norm,
                inner_iterations: j,
            });
        }
        let beta = rr_next / rr;
        rr = rr_next;
        pdir = &r + &(beta * &pdir);
    }
    Err(SubproblemError::InnerExhausted {
        iterations: max_inner,
        certificate_norm: rr.sqrt(),
        threshold: criterion.threshold(norm(&delta)),
    })
}

/// Selects the inner solver: conjugate gradient when the regularizer slice is
/// zero, proximal gradient otherwise.
pub fn solve_inner(
    model: &RestrictedQuadraticModel,
    criterion: InnerCriterion,
    max_inner: usize,
) -> Result<InexactSolution, SubproblemError> {
    if model.reg_slice.is_zero() {
        cg_inner(model, criterion, max_inner)
    } else {
        prox_grad_inner(model, criterion, max_inner)
    }
}

/// Backtracking damping rule: `eta = 1.01 (mu + max(0, -floor))`. The margin
/// keeps the damped block curvature at least `mu`-strongly convex given a
/// valid floor. Errors when a known admissible bound is exceeded.
pub fn eta_linesearch_policy(
    curvature_floor: f64,
    mu: f64,
    eta_bar: Option<f64>,
) -> Result<f64, SubproblemError> {
    let eta = 1.01 * (mu + (-curvature_floor).max(0.0));
    if let Some(bar) = eta_bar {
        if eta > bar {
            return Err(SubproblemError::EtaExceedsBar { eta, eta_bar: bar });
        }
    }
    Ok(eta)
}

/// Damping rule used by the classification experiments:
/// `eta = 1.01 max(-floor, mu)`.
pub fn eta_classification_policy(curvature_floor: f64, mu: f64) -> f64 {
    1.01 * (-curvature_floor).max(mu)
}

/// Gated damping for curvature built from clamped nonnegative weights: nearly
/// no damping when the smallest weight already carries `mu`-strong convexity,
/// a full `1.01 mu` otherwise.
pub fn eta_gate_policy(min_weight: f64, mu: f64) -> f64 {
    if min_weight + 0.01 * mu >= mu {
        0.01 * mu
    } else {
        1.01 * mu
    }
}

/// Parameters the unit-step algorithm derives before it can skip line search.
#[derive(Debug, Clone, Copy)]
pub struct UnitStepParams {
    /// Strong-convexity margin the damped block curvature must reach.
    pub theta_reg: f64,
    pub eta: f64,
    pub eta_bar: f64,
}

/// Unit-step damping rule. Requires the gradient Lipschitz bound; picks the
/// smallest `eta` making both the blockwise margin condition and the
/// full-space descent condition hold given a valid curvature floor (a floor
/// for the full operator also bounds every principal block from below).
pub fn eta_unit_policy(
    l_g: f64,
    zeta: f64,
    mu: f64,
    curvature_floor: f64,
) -> Result<UnitStepParams, SubproblemError> {
    let theta_reg = 1.1
        * mu
        * (0.5 * (1.0 + 2.0 * zeta + 3.0 * l_g + mu))
            .max((1.0 + 2.0 * zeta + 2.0 * l_g) / (2.0 - mu));
    let eta_bar = (mu + 2.0 * l_g + zeta).max(theta_reg + l_g + zeta);
    let eta = (theta_reg - curvature_floor)
        .max(l_g + mu - curvature_floor)
        .max(1e-12);
    if eta > eta_bar {
        return Err(SubproblemError::EtaExceedsBar { eta, eta_bar });
    }
    Ok(UnitStepParams {
        theta_reg,
        eta,
        eta_bar,
    })
}
