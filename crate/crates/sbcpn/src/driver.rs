//! Outer solver loops: backtracking line search, unit step, and the
//! variable-metric baseline, all sharing one iteration skeleton.
//!
//! Every run is deterministic given its seed: the only randomness flows
//! through one counter-based generator handed to the block sampler.

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

use crate::problem::{BlockIndexSet, BlockOperator, CompositeProblem, SmoothOracle};
use crate::residual::{residual, ResidualError};
use crate::sampling::{BlockSampler, SamplingError, UnitSpace};
use crate::subproblem::{
    eig_floor_estimate, eta_classification_policy, eta_gate_policy, eta_linesearch_policy,
    eta_unit_policy, solve_inner, InnerCriterion, RestrictedQuadraticModel, SubproblemError,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error("damping policy failed at iteration {k}: {source}")]
    Damping { k: usize, source: SubproblemError },
    #[error("unit-step mode needs a gradient Lipschitz bound from the oracle")]
    NeedsLipschitz,
    #[error("line search exhausted {trials} trials at iteration {k}")]
    LineSearchExhausted { k: usize, trials: usize },
    #[error("invariant violated at iteration {k}: {what}")]
    Invariant { k: usize, what: String },
}

/// Which outer algorithm advances the iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    /// Backtracking line search on the certified inexact proximal Newton step.
    LineSearch,
    /// Unit steps justified by heavier damping; needs the Lipschitz bound.
    UnitStep,
    /// Variable-metric baseline: fixed spectral prox-gradient inner sweeps and
    /// a slope-based line search, no certificate.
    VmBaseline,
}

impl std::str::FromStr for AlgorithmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linesearch" => Ok(AlgorithmKind::LineSearch),
            "unitstep" => Ok(AlgorithmKind::UnitStep),
            "vm" => Ok(AlgorithmKind::VmBaseline),
            other => Err(format!(
                "unknown algorithm {other:?}; known: linesearch, unitstep, vm"
            )),
        }
    }
}

/// How the per-iteration damping `eta` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaRule {
    /// `1.01 (mu + max(0, -floor))` from the best available curvature floor.
    Margin,
    /// `1.01 max(-floor, mu)` from the oracle's analytic floor.
    Classification,
    /// Gate on the smallest clamped curvature weight: `0.01 mu` or `1.01 mu`.
    WeightGate,
    /// A caller-imposed constant.
    Fixed(f64),
}

impl std::str::FromStr for EtaRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "margin" => Ok(EtaRule::Margin),
            "classification" => Ok(EtaRule::Classification),
            "gate" => Ok(EtaRule::WeightGate),
            other => match other.strip_prefix("fixed:") {
                Some(v) => v
                    .parse::<f64>()
                    .map(EtaRule::Fixed)
                    .map_err(|e| format!("bad fixed damping value {v:?}: {e}")),
                None => Err(format!(
                    "unknown damping rule {other:?}; known: margin, classification, gate, fixed:<v>"
                )),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub algorithm: AlgorithmKind,
    /// Inexactness constant; also the strong-convexity margin of subproblems.
    pub mu: f64,
    /// Sufficient-decrease constant of the line search, in `(0, mu)`.
    pub tau: f64,
    /// Backtracking factor in `(0, 1)`.
    pub theta: f64,
    pub max_outer: usize,
    /// Stop once the stationarity residual norm falls to this value.
    pub stop_tol: f64,
    pub seed: u64,
    /// Slope fraction of the baseline's line search.
    pub vm_gamma: f64,
    /// Fixed inner sweep count of the baseline.
    pub vm_inner_iters: usize,
    pub max_inner: usize,
    pub max_ls_trials: usize,
    pub eta_rule: EtaRule,
    /// Replace the curvature operator by zero (prox-gradient reduction runs).
    pub zero_curvature: bool,
    /// Absolute certificate tolerance overriding the step-fraction criterion.
    pub exact_inner: Option<f64>,
    /// Check descent/step-floor/residual-bound invariants while running.
    pub check_invariants: bool,
    /// Keep every iterate in the trace.
    pub record_iterates: bool,
    /// Also try a power-iteration curvature floor under the margin rule. The
    /// estimate only counts when the iteration converges, and it is still
    /// treated as uncertified: every step guarantee is re-verified and a
    /// breach falls back to the certified floor. Near a solution this lifts
    /// the damping off the conservative coordinatewise floor, which is what
    /// lets the local rate go superlinear.
    pub refine_floor: bool,
    /// A lower bound on the objective, consumed by rate-envelope checks.
    pub phi_lb: f64,
}

impl SolverConfig {
    pub fn new(algorithm: AlgorithmKind) -> Self {
        Self {
            algorithm,
            mu: 1e-5,
            tau: 5e-6,
            theta: 0.6,
            max_outer: 5000,
            stop_tol: 1e-4,
            seed: 0,
            vm_gamma: 1e-4,
            vm_inner_iters: 10,
            max_inner: 500,
            max_ls_trials: 60,
            eta_rule: EtaRule::Margin,
            zero_curvature: false,
            exact_inner: None,
            check_invariants: true,
            record_iterates: false,
            refine_floor: true,
            phi_lb: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(SolverError::Config(format!(
                "mu must lie in (0, 1), got {}",
                self.mu
            )));
        }
        if !(self.tau > 0.0 && self.tau < self.mu) {
            return Err(SolverError::Config(format!(
                "tau must lie in (0, mu) = (0, {}), got {}",
                self.mu, self.tau
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(SolverError::Config(format!(
                "theta must lie in (0, 1), got {}",
                self.theta
            )));
        }
        if !(self.vm_gamma > 0.0 && self.vm_gamma < 1.0) {
            return Err(SolverError::Config(format!(
                "vm_gamma must lie in (0, 1), got {}",
                self.vm_gamma
            )));
        }
        if self.stop_tol < 0.0 {
            return Err(SolverError::Config("stop_tol must be nonnegative".into()));
        }
        if self.vm_inner_iters == 0 || self.max_inner == 0 || self.max_ls_trials == 0 {
            return Err(SolverError::Config(
                "iteration budgets must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    MaxIter,
    InnerFailure,
}

/// One outer-loop entry: the state at iterate `k` plus the step taken from it
/// (step fields stay zero on the final row and on zero-direction skips).
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub phi: f64,
    pub resid_norm: f64,
    pub step_size: f64,
    pub ls_trials: usize,
    pub block: Option<BlockIndexSet>,
    pub inner_iterations: usize,
    pub certificate_norm: f64,
    pub step_norm: f64,
    /// Seconds since the run started, taken when the row was finished.
    pub wall_clock: f64,
    /// `||G(x^k)||` restricted to the sampled block.
    pub resid_block_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
    pub status: RunStatus,
    pub final_x: Array1<f64>,
    /// Populated when `record_iterates` is set; `iterates[k]` is `x^k`.
    pub iterates: Vec<Array1<f64>>,
    /// Diagnostic accompanying an `InnerFailure` status.
    pub failure: Option<String>,
}

impl SolveTrace {
    pub fn final_resid_norm(&self) -> f64 {
        self.records
            .last()
            .map(|r| r.resid_norm)
            .unwrap_or(f64::NAN)
    }
}

pub struct LineSearchResult {
    pub alpha: f64,
    /// Accepted backtracking exponent `j` (`alpha = theta^j`).
    pub trials: usize,
    pub x_new: Array1<f64>,
    pub phi_new: f64,
}

/// Finds the largest `alpha = theta^j`, `j = 0, 1, ...`, with
/// `phi(x + alpha d) <= phi(x) - (tau/2) alpha ||d||^2`.
///
/// Acceptance carries a machine-epsilon slack proportional to `|phi(x)|`:
/// near a minimizer the demanded decrease drops below what two rounded
/// objective values can resolve, and without the slack the choice would be
/// made by rounding noise.
#[allow(clippy::too_many_arguments)]
pub fn backtracking_line_search(
    problem: &CompositeProblem,
    x: &ArrayView1<f64>,
    phi_x: f64,
    block: &BlockIndexSet,
    d: &ArrayView1<f64>,
    tau: f64,
    theta: f64,
    max_trials: usize,
) -> Option<LineSearchResult> {
    let dd = d.dot(d);
    let slack = 4.0 * f64::EPSILON * (1.0 + phi_x.abs());
    for j in 0..max_trials {
        let alpha = theta.powi(j as i32);
        let mut x_trial = x.to_owned();
        block.scatter_add(&mut x_trial, d, alpha);
        let phi_trial = problem.value(&x_trial.view());
        if phi_trial <= phi_x - 0.5 * tau * alpha * dd + slack {
            return Some(LineSearchResult {
                alpha,
                trials: j,
                x_new: x_trial,
                phi_new: phi_trial,
            });
        }
    }
    None
}

/// The unit space matching a problem: whole groups when the regularizer is
/// grouped, single coordinates otherwise.
pub fn unit_space_for(problem: &CompositeProblem) -> UnitSpace {
    match problem.reg.groups() {
        Some(groups) => UnitSpace::group(problem.dim(), groups.to_vec()),
        None => UnitSpace::coordinate(problem.dim()),
    }
}

fn check_sampler_matches(
    problem: &CompositeProblem,
    sampler: &dyn BlockSampler,
) -> Result<(), SolverError> {
    let expected = unit_space_for(problem);
    if sampler.unit_space() != &expected {
        return Err(SolverError::Config(
            "sampler unit space does not match the problem (grouped regularizers sample whole groups)"
                .into(),
        ));
    }
    Ok(())
}

struct ZeroOperator {
    size: usize,
}

impl BlockOperator for ZeroOperator {
    fn size(&self) -> usize {
        self.size
    }

    fn apply_into(&self, _v: &ArrayView1<f64>, out: &mut Array1<f64>) {
        out.fill(0.0);
    }

    fn norm_bound(&self) -> Option<f64> {
        Some(0.0)
    }

    fn eig_floor(&self) -> Option<f64> {
        Some(0.0)
    }
}

// Lower bound on the restricted curvature's smallest eigenvalue, with a flag
// saying whether the bound is certified. Certified sources: the operator's own
// claim, the full-space analytic floor (every principal compression inherits
// it), and minus the spectral Lipschitz bound. Without any of those the power
// estimate stands in, and the flag turns the dependent invariants advisory.
fn certified_floor(
    q_op: &dyn BlockOperator,
    oracle: &dyn SmoothOracle,
    x: &ArrayView1<f64>,
    l_g: Option<f64>,
    zeta: f64,
) -> (f64, bool) {
    let mut floor = f64::NEG_INFINITY;
    if let Some(f) = q_op.eig_floor() {
        floor = floor.max(f);
    }
    if let Some(f) = oracle.curvature_floor(x) {
        floor = floor.max(f);
    }
    if let Some(lg) = l_g {
        floor = floor.max(-(lg + zeta));
    }
    if floor.is_finite() {
        (floor, true)
    } else {
        (-1.05 * crate::subproblem::op_norm_estimate(q_op, 60), false)
    }
}

/// A damping value to try, with whether it provably makes the damped model
/// `mu`-strongly convex. Uncertified candidates are heuristics: breaking a
/// step guarantee under one falls back to the next candidate instead of
/// flagging an invariant violation.
struct EtaCandidate {
    eta: f64,
    modulus_certified: bool,
}

/// How an iteration advanced once some damping candidate went through.
enum Advance {
    Skip {
        inner: usize,
        cert: f64,
    },
    Step {
        inner: usize,
        cert: f64,
        d_norm: f64,
        alpha: f64,
        trials: usize,
        x_new: Array1<f64>,
    },
}

struct RunState {
    x: Array1<f64>,
    phi: f64,
    f_smooth: f64,
    k: usize,
}

fn vm_inner_sweeps(model: &RestrictedQuadraticModel, sweeps: usize) -> (Array1<f64>, usize) {
    let op_norm = match model.q_op.norm_bound() {
        Some(b) => b,
        None => 1.05 * crate::subproblem::op_norm_estimate(&*model.q_op, 20),
    };
    let t0 = 1.0 / (op_norm + model.eta);
    let mut y = model.base.clone();
    let mut g = model.grad_slice.clone();
    let mut prev: Option<(Array1<f64>, Array1<f64>)> = None;
    let mut best_y = y.clone();
    let mut best_q = model.value(&y.view());
    for _ in 0..sweeps {
        let t = match &prev {
            None => t0,
            Some((yp, gp)) => {
                let s = &y - yp;
                let dg = &g - gp;
                let sg = s.dot(&dg);
                if sg > 0.0 {
                    (s.dot(&s) / sg).clamp(1e-12, 1e12)
                } else {
                    t0
                }
            }
        };
        let u = &y - &(t * &g);
        let y_next = model.reg_slice.prox_full(&u.view(), t);
        let g_next = model.smooth_grad(&y_next.view());
        let q_next = model.value(&y_next.view());
        if q_next < best_q {
            best_q = q_next;
            best_y = y_next.clone();
        }
        prev = Some((y, g));
        y = y_next;
        g = g_next;
    }
    (best_y, sweeps)
}

fn solve_loop(
    problem: &CompositeProblem,
    config: &SolverConfig,
    sampler: &mut dyn BlockSampler,
    algorithm: AlgorithmKind,
    x0: Option<&Array1<f64>>,
) -> Result<SolveTrace, SolverError> {
    config.validate()?;
    check_sampler_matches(problem, sampler)?;
    let n = problem.dim();
    let oracle = &*problem.smooth;
    let zeta = oracle.curvature_gap();
    let l_g = oracle.lipschitz_bound();
    if algorithm == AlgorithmKind::UnitStep && l_g.is_none() {
        return Err(SolverError::NeedsLipschitz);
    }
    let criterion = match config.exact_inner {
        Some(tol) => InnerCriterion::Absolute(tol),
        None => InnerCriterion::StepFraction(config.mu),
    };
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x_init = match x0 {
        Some(v) => {
            if v.len() != n {
                return Err(SolverError::Config(format!(
                    "initial point has length {}, problem dimension is {n}",
                    v.len()
                )));
            }
            v.clone()
        }
        None => Array1::zeros(n),
    };
    let mut state = RunState {
        f_smooth: oracle.eval(&x_init.view()),
        phi: 0.0,
        x: x_init,
        k: 0,
    };
    state.phi = state.f_smooth + problem.reg.value(&state.x.view());

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut iterates: Vec<Array1<f64>> = Vec::new();
    if config.record_iterates {
        iterates.push(state.x.clone());
    }

    loop {
        let grad = oracle.gradient(&state.x.view());
        let rep = residual(problem, &state.x.view(), &grad.view())?;
        let mut record = IterationRecord {
            k: state.k,
            phi: state.phi,
            resid_norm: rep.norm,
            step_size: 0.0,
            ls_trials: 0,
            block: None,
            inner_iterations: 0,
            certificate_norm: 0.0,
            step_norm: 0.0,
            wall_clock: 0.0,
            resid_block_norm: 0.0,
        };

        if rep.norm <= config.stop_tol {
            record.wall_clock = clock.elapsed().as_secs_f64();
            records.push(record);
            return Ok(SolveTrace {
                records,
                status: RunStatus::Converged,
                final_x: state.x,
                iterates,
                failure: None,
            });
        }
        if state.k >= config.max_outer {
            record.wall_clock = clock.elapsed().as_secs_f64();
            records.push(record);
            return Ok(SolveTrace {
                records,
                status: RunStatus::MaxIter,
                final_x: state.x,
                iterates,
                failure: None,
            });
        }

        let scores;
        let scores_opt = if sampler.needs_scores() {
            scores = sampler.unit_space().unit_scores(&rep.g_full.view());
            Some(scores.as_slice())
        } else {
            None
        };
        let block = sampler.sample(&mut rng, scores_opt)?;
        let g_slice = block.gather(&rep.g_full.view());
        record.resid_block_norm = g_slice.dot(&g_slice).sqrt();
        record.block = Some(block.clone());

        let q_op: Box<dyn BlockOperator> = if config.zero_curvature {
            Box::new(ZeroOperator { size: block.len() })
        } else {
            oracle.restricted_curvature(&state.x.view(), &block)
        };

        // Certified spectrum floor for the block, used both to pick damping
        // candidates and to decide which step guarantees are provable.
        let (floor_cert, floor_is_certified) =
            certified_floor(&*q_op, oracle, &state.x.view(), l_g, zeta);
        let certify = |eta: f64| floor_is_certified && eta + floor_cert >= config.mu * (1.0 - 1e-9);

        // Damping candidates in the order they are tried. A power-refined
        // floor may overestimate the smallest eigenvalue when the iteration
        // has not converged, leaving the model short of its margin; any
        // failure under it falls through to the certified floor.
        let eta_list: Vec<EtaCandidate> = match algorithm {
            AlgorithmKind::UnitStep => {
                let lg = l_g.expect("checked above");
                let full_floor = oracle
                    .curvature_floor(&state.x.view())
                    .unwrap_or(-(lg + zeta));
                let eta = eta_unit_policy(lg, zeta, config.mu, full_floor)
                    .map_err(|source| SolverError::Damping { k: state.k, source })?
                    .eta;
                vec![EtaCandidate {
                    eta,
                    modulus_certified: certify(eta),
                }]
            }
            _ => match config.eta_rule {
                EtaRule::Margin => {
                    let eta_bar = l_g.map(|lg| config.mu + 2.0 * lg + zeta);
                    let eta_safe = eta_linesearch_policy(floor_cert, config.mu, eta_bar)
                        .map_err(|source| SolverError::Damping { k: state.k, source })?;
                    let mut list = Vec::with_capacity(2);
                    if config.refine_floor && algorithm != AlgorithmKind::VmBaseline {
                        if let Some(est) = eig_floor_estimate(&*q_op, 96) {
                            let refined = est.max(floor_cert);
                            let eta_refined = eta_linesearch_policy(refined, config.mu, eta_bar)
                                .map_err(|source| SolverError::Damping { k: state.k, source })?;
                            if eta_refined < eta_safe {
                                list.push(EtaCandidate {
                                    eta: eta_refined,
                                    modulus_certified: certify(eta_refined),
                                });
                            }
                        }
                    }
                    list.push(EtaCandidate {
                        eta: eta_safe,
                        modulus_certified: certify(eta_safe),
                    });
                    list
                }
                EtaRule::Classification => {
                    let floor = oracle
                        .curvature_floor(&state.x.view())
                        .unwrap_or(floor_cert);
                    let eta = eta_classification_policy(floor, config.mu);
                    vec![EtaCandidate {
                        eta,
                        modulus_certified: certify(eta),
                    }]
                }
                EtaRule::WeightGate => {
                    let w = oracle
                        .min_curvature_weight(&state.x.view())
                        .ok_or_else(|| {
                            SolverError::Config(
                            "gate damping rule needs per-sample curvature weights from the oracle"
                                .into(),
                        )
                        })?;
                    let eta = eta_gate_policy(w, config.mu);
                    vec![EtaCandidate {
                        eta,
                        modulus_certified: certify(eta),
                    }]
                }
                EtaRule::Fixed(v) => vec![EtaCandidate {
                    eta: v,
                    modulus_certified: certify(v),
                }],
            },
        };

        let reg_slice = match problem.reg.restrict(&block) {
            Ok(r) => r,
            Err(e) => return Err(SolverError::Residual(ResidualError::Restriction(e))),
        };
        let mut model = RestrictedQuadraticModel {
            f_base: state.f_smooth,
            grad_slice: block.gather(&grad.view()),
            q_op,
            eta: eta_list[0].eta,
            base: block.gather(&state.x.view()),
            reg_slice,
        };

        let eta_bar_check = match (algorithm, l_g) {
            (AlgorithmKind::UnitStep, Some(lg)) => Some(
                eta_unit_policy(lg, zeta, config.mu, 0.0)
                    .map_err(|source| SolverError::Damping { k: state.k, source })?
                    .eta_bar,
            ),
            (_, Some(lg)) => Some(config.mu + 2.0 * lg + zeta),
            _ => None,
        };

        // One attempt per damping candidate: inner solve, guarantee checks,
        // outer step. Guarantees are always verified for provisional
        // candidates so a breach falls through to the certified one; on the
        // final candidate they run only when invariant checking is on, and a
        // breach is an error exactly when its premise is certified.
        let mut advance: Option<Advance> = None;
        let mut inner_err: Option<SubproblemError> = None;
        for (ci, cand) in eta_list.iter().enumerate() {
            let last = ci + 1 == eta_list.len();
            let verify = !last || config.check_invariants;
            model.eta = cand.eta;
            let (y_hat, inner_iterations, certificate_norm) = match algorithm {
                AlgorithmKind::VmBaseline => {
                    let (y, sweeps) = vm_inner_sweeps(&model, config.vm_inner_iters);
                    (y, sweeps, 0.0)
                }
                _ => match solve_inner(&model, criterion, config.max_inner) {
                    Ok(sol) => (sol.y_hat, sol.inner_iterations, sol.certificate_norm),
                    Err(e) => {
                        inner_err = Some(e);
                        continue;
                    }
                },
            };

            let d = &y_hat - &model.base;
            let d_norm = d.dot(&d).sqrt();
            if d_norm == 0.0 {
                // Stationary block: skip the step, keep the iterate.
                advance = Some(Advance::Skip {
                    inner: inner_iterations,
                    cert: certificate_norm,
                });
                break;
            }

            if verify && algorithm != AlgorithmKind::VmBaseline {
                let thr = match criterion {
                    InnerCriterion::StepFraction(mu) => 0.5 * mu * d_norm,
                    InnerCriterion::Absolute(tol) => tol,
                };
                if certificate_norm > thr {
                    // The inner solver's own contract, independent of eta.
                    return Err(SolverError::Invariant {
                        k: state.k,
                        what: format!(
                            "certificate {:.3e} above threshold {:.3e}",
                            certificate_norm, thr
                        ),
                    });
                }
                let qv = model.value(&y_hat.view());
                let q0 = model.value(&model.base.view());
                if qv > q0 + 1e-10 * (1.0 + q0.abs()) {
                    if !last {
                        continue;
                    }
                    return Err(SolverError::Invariant {
                        k: state.k,
                        what: format!("model value rose from {q0:.6e} to {qv:.6e}"),
                    });
                }
                if let Some(eta_bar) = eta_bar_check {
                    // Block residual is controlled by the step the model
                    // proposes, provided the damping stayed under its cap.
                    if cand.eta <= eta_bar * (1.0 + 1e-12) {
                        let lg = l_g.expect("cap implies a Lipschitz bound");
                        let c1 = 1.0 + lg + zeta + eta_bar + 0.5 * config.mu;
                        if record.resid_block_norm > c1 * d_norm * (1.0 + 1e-10) + 1e-12 {
                            if !last {
                                continue;
                            }
                            return Err(SolverError::Invariant {
                                k: state.k,
                                what: format!(
                                    "block residual {:.6e} exceeds {c1:.3} * step {:.6e}",
                                    record.resid_block_norm, d_norm
                                ),
                            });
                        }
                    }
                }
            }

            match algorithm {
                AlgorithmKind::LineSearch => {
                    let ls = backtracking_line_search(
                        problem,
                        &state.x.view(),
                        state.phi,
                        &block,
                        &d.view(),
                        config.tau,
                        config.theta,
                        config.max_ls_trials,
                    );
                    let Some(ls) = ls else {
                        if !last {
                            continue;
                        }
                        return Err(SolverError::LineSearchExhausted {
                            k: state.k,
                            trials: config.max_ls_trials,
                        });
                    };
                    if let Some(lg) = l_g {
                        let floor = (config.theta * (config.mu - config.tau) / lg).min(1.0);
                        if ls.alpha < floor * (1.0 - 1e-12) {
                            if !last {
                                continue;
                            }
                            if config.check_invariants && cand.modulus_certified {
                                return Err(SolverError::Invariant {
                                    k: state.k,
                                    what: format!(
                                        "step size {} fell below its floor {floor}",
                                        ls.alpha
                                    ),
                                });
                            }
                        }
                    }
                    advance = Some(Advance::Step {
                        inner: inner_iterations,
                        cert: certificate_norm,
                        d_norm,
                        alpha: ls.alpha,
                        trials: ls.trials,
                        x_new: ls.x_new,
                    });
                    break;
                }
                AlgorithmKind::UnitStep => {
                    let mut x_new = state.x.clone();
                    block.scatter_add(&mut x_new, &d.view(), 1.0);
                    let phi_new = problem.value(&x_new.view());
                    let need = 0.5 * config.mu * d_norm * d_norm;
                    if state.phi - phi_new < need - 1e-10 * (1.0 + state.phi.abs()) {
                        if !last {
                            continue;
                        }
                        if config.check_invariants && cand.modulus_certified {
                            return Err(SolverError::Invariant {
                                k: state.k,
                                what: format!(
                                    "unit step decrease {:.6e} below mu/2 ||d||^2 = {need:.6e}",
                                    state.phi - phi_new
                                ),
                            });
                        }
                    }
                    advance = Some(Advance::Step {
                        inner: inner_iterations,
                        cert: certificate_norm,
                        d_norm,
                        alpha: 1.0,
                        trials: 0,
                        x_new,
                    });
                    break;
                }
                AlgorithmKind::VmBaseline => {
                    let slope = model.grad_slice.dot(&d) + model.reg_slice.value(&y_hat.view())
                        - model.reg_slice.value(&model.base.view());
                    let mut accepted = None;
                    for j in 0..config.max_ls_trials {
                        let alpha = config.theta.powi(j as i32);
                        let mut x_trial = state.x.clone();
                        block.scatter_add(&mut x_trial, &d.view(), alpha);
                        let phi_trial = problem.value(&x_trial.view());
                        if phi_trial <= state.phi + alpha * config.vm_gamma * slope {
                            accepted = Some((alpha, j, x_trial));
                            break;
                        }
                    }
                    let Some((alpha, trials, x_new)) = accepted else {
                        return Err(SolverError::LineSearchExhausted {
                            k: state.k,
                            trials: config.max_ls_trials,
                        });
                    };
                    advance = Some(Advance::Step {
                        inner: inner_iterations,
                        cert: certificate_norm,
                        d_norm,
                        alpha,
                        trials,
                        x_new,
                    });
                    break;
                }
            }
        }

        let advance = match advance {
            Some(a) => a,
            None => {
                let e = inner_err.expect("no advance implies an inner failure");
                record.wall_clock = clock.elapsed().as_secs_f64();
                records.push(record);
                return Ok(SolveTrace {
                    records,
                    status: RunStatus::InnerFailure,
                    final_x: state.x,
                    iterates,
                    failure: Some(format!("iteration {}: {e}", state.k)),
                });
            }
        };
        match advance {
            Advance::Skip { inner, cert } => {
                record.inner_iterations = inner;
                record.certificate_norm = cert;
            }
            Advance::Step {
                inner,
                cert,
                d_norm,
                alpha,
                trials,
                x_new,
            } => {
                record.inner_iterations = inner;
                record.certificate_norm = cert;
                record.step_norm = d_norm;
                record.step_size = alpha;
                record.ls_trials = trials;
                state.x = x_new;
                state.f_smooth = oracle.eval(&state.x.view());
                // phi from scratch so stored values cannot drift.
                state.phi = state.f_smooth + problem.reg.value(&state.x.view());
            }
        }
        record.wall_clock = clock.elapsed().as_secs_f64();
        records.push(record);
        state.k += 1;
        if config.record_iterates {
            iterates.push(state.x.clone());
        }
    }
}

/// Runs the backtracking line-search algorithm.
pub fn run_alg1(
    problem: &CompositeProblem,
    config: &SolverConfig,
    sampler: &mut dyn BlockSampler,
) -> Result<SolveTrace, SolverError> {
    solve_loop(problem, config, sampler, AlgorithmKind::LineSearch, None)
}

/// Runs the unit-step algorithm; requires the oracle's Lipschitz bound.
pub fn run_alg2(
    problem: &CompositeProblem,
    config: &SolverConfig,
    sampler: &mut dyn BlockSampler,
) -> Result<SolveTrace, SolverError> {
    solve_loop(problem, config, sampler, AlgorithmKind::UnitStep, None)
}

/// Runs the variable-metric baseline.
pub fn run_vm(
    problem: &CompositeProblem,
    config: &SolverConfig,
    sampler: &mut dyn BlockSampler,
) -> Result<SolveTrace, SolverError> {
    solve_loop(problem, config, sampler, AlgorithmKind::VmBaseline, None)
}

/// Dispatches on `config.algorithm`.
pub fn solve(
    problem: &CompositeProblem,
    config: &SolverConfig,
    sampler: &mut dyn BlockSampler,
) -> Result<SolveTrace, SolverError> {
    solve_loop(problem, config, sampler, config.algorithm, None)
}

/// Like `solve`, from a caller-chosen starting point.
pub fn solve_from(
    problem: &CompositeProblem,
    config: &SolverConfig,
    sampler: &mut dyn BlockSampler,
    x0: &Array1<f64>,
) -> Result<SolveTrace, SolverError> {
    solve_loop(problem, config, sampler, config.algorithm, Some(x0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::QuadraticOracle;
    use crate::regularizer::SeparableRegularizer;
    use crate::sampling::build_sampler;
    use ndarray::array;

    fn quad_problem(target: Array1<f64>) -> CompositeProblem {
        let n = target.len();
        CompositeProblem::new(
            Box::new(QuadraticOracle { target }),
            SeparableRegularizer::zero(n),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        let mut c = SolverConfig::new(AlgorithmKind::LineSearch);
        assert!(c.validate().is_ok());
        c.tau = c.mu;
        assert!(c.validate().is_err());
        c.tau = 1e-6;
        c.theta = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn quadratic_converges_in_few_iterations() {
        let target = array![1.0, -2.0, 3.0, 0.5];
        let problem = quad_problem(target.clone());
        let mut config = SolverConfig::new(AlgorithmKind::LineSearch);
        config.stop_tol = 1e-10;
        let mut sampler = build_sampler("full", 4, unit_space_for(&problem)).unwrap();
        let trace = run_alg1(&problem, &config, &mut *sampler).unwrap();
        assert_eq!(trace.status, RunStatus::Converged);
        // Three Newton steps, each shrinking the residual by O(eta), then the
        // stationary final row.
        assert!(
            trace.records.len() <= 4,
            "took {} rows",
            trace.records.len()
        );
        for i in 0..4 {
            assert!((trace.final_x[i] - target[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn stationary_start_yields_single_row() {
        let problem = quad_problem(array![2.0, -1.0]);
        let mut config = SolverConfig::new(AlgorithmKind::LineSearch);
        config.stop_tol = 1e-12;
        let mut sampler = build_sampler("full", 2, unit_space_for(&problem)).unwrap();
        let trace = solve_from(&problem, &config, &mut *sampler, &array![2.0, -1.0]).unwrap();
        assert_eq!(trace.status, RunStatus::Converged);
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].k, 0);
        assert_eq!(trace.records[0].step_norm, 0.0);
    }

    #[test]
    fn max_outer_caps_the_run() {
        let problem = quad_problem(array![5.0, 5.0, 5.0, 5.0, 5.0, 5.0]);
        let mut config = SolverConfig::new(AlgorithmKind::LineSearch);
        config.stop_tol = 1e-14;
        config.max_outer = 2;
        // One coordinate at a time cannot finish in two iterations.
        let mut sampler = build_sampler("cyc-perm", 1, unit_space_for(&problem)).unwrap();
        let trace = run_alg1(&problem, &config, &mut *sampler).unwrap();
        assert_eq!(trace.status, RunStatus::MaxIter);
        assert_eq!(trace.records.len(), 3);
    }

    #[test]
    fn traces_are_bit_identical_across_runs() {
        let problem = quad_problem(Array1::from_iter(
            (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0),
        ));
        let mut config = SolverConfig::new(AlgorithmKind::LineSearch);
        config.stop_tol = 1e-9;
        config.seed = 42;
        config.record_iterates = true;
        let run = || {
            let mut sampler = build_sampler("uniform", 6, unit_space_for(&problem)).unwrap();
            solve(&problem, &config, &mut *sampler).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.records.len(), b.records.len());
        assert_eq!(a.iterates.len(), b.iterates.len());
        for (xa, xb) in a.iterates.iter().zip(&b.iterates) {
            assert_eq!(xa, xb, "iterates must match bit for bit");
        }
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.phi.to_bits(), rb.phi.to_bits());
            assert_eq!(ra.resid_norm.to_bits(), rb.resid_norm.to_bits());
        }
    }

    #[test]
    fn unit_step_needs_lipschitz_and_descends() {
        let problem = quad_problem(array![1.0, 2.0, -1.5, 0.25]);
        let config = SolverConfig::new(AlgorithmKind::UnitStep);
        let mut sampler = build_sampler("cyc-contig", 2, unit_space_for(&problem)).unwrap();
        let trace = run_alg2(&problem, &config, &mut *sampler).unwrap();
        assert_eq!(trace.status, RunStatus::Converged);
        for w in trace.records.windows(2) {
            assert!(w[1].phi <= w[0].phi + 1e-12);
            assert_eq!(w[0].step_size, 1.0);
        }
    }

    #[test]
    fn vm_baseline_reaches_the_same_minimizer() {
        let target = array![0.5, -0.25, 1.5];
        let problem = CompositeProblem::new(
            Box::new(QuadraticOracle {
                target: target.clone(),
            }),
            SeparableRegularizer::l1(3, 0.1),
        )
        .unwrap();
        let mut config = SolverConfig::new(AlgorithmKind::VmBaseline);
        config.stop_tol = 1e-8;
        let mut sampler = build_sampler("full", 3, unit_space_for(&problem)).unwrap();
        let trace = run_vm(&problem, &config, &mut *sampler).unwrap();
        assert_eq!(trace.status, RunStatus::Converged);
        // Soft-thresholded target coordinates.
        for i in 0..3 {
            let expect = target[i].signum() * (target[i].abs() - 0.1).max(0.0);
            assert!((trace.final_x[i] - expect).abs() <= 1e-6);
        }
        for w in trace.records.windows(2) {
            assert!(w[1].phi <= w[0].phi + 1e-12);
        }
    }

    #[test]
    fn line_search_examples() {
        // Quadratic accepts the unit step.
        let problem = quad_problem(array![0.0]);
        let x = array![1.0];
        let phi_x = 0.5;
        let block = BlockIndexSet::full(1);
        let d = array![-2.0 / 3.0];
        let r =
            backtracking_line_search(&problem, &x.view(), phi_x, &block, &d.view(), 0.25, 0.5, 60)
                .unwrap();
        assert_eq!(r.alpha, 1.0);
        assert_eq!(r.trials, 0);

        // Cubic rejects alpha = 1 and accepts alpha = theta.
        struct Cubic;
        impl crate::problem::SmoothOracle for Cubic {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, x: &ArrayView1<f64>) -> f64 {
                x[0].powi(3) - x[0]
            }
            fn gradient(&self, x: &ArrayView1<f64>) -> Array1<f64> {
                array![3.0 * x[0] * x[0] - 1.0]
            }
            fn restricted_curvature<'a>(
                &'a self,
                x: &ArrayView1<f64>,
                _block: &BlockIndexSet,
            ) -> Box<dyn crate::problem::BlockOperator + 'a> {
                Box::new(crate::problem::DenseOperator(ndarray::array![[6.0 * x[0]]]))
            }
        }
        let problem =
            CompositeProblem::new(Box::new(Cubic), SeparableRegularizer::zero(1)).unwrap();
        let x = array![0.0];
        let r = backtracking_line_search(
            &problem,
            &x.view(),
            0.0,
            &BlockIndexSet::full(1),
            &array![1.0].view(),
            0.25,
            0.5,
            60,
        )
        .unwrap();
        assert_eq!(r.trials, 1);
        assert_eq!(r.alpha, 0.5);
    }

    #[test]
    fn grouped_problems_reject_coordinate_samplers() {
        let problem = CompositeProblem::new(
            Box::new(QuadraticOracle {
                target: Array1::zeros(6),
            }),
            SeparableRegularizer::group_l2(6, 0.1, vec![0..3, 3..6]).unwrap(),
        )
        .unwrap();
        let config = SolverConfig::new(AlgorithmKind::LineSearch);
        let mut sampler = build_sampler("uniform", 2, UnitSpace::coordinate(6)).unwrap();
        assert!(matches!(
            run_alg1(&problem, &config, &mut *sampler),
            Err(SolverError::Config(_))
        ));
        let mut grouped = build_sampler("uniform", 1, unit_space_for(&problem)).unwrap();
        assert!(run_alg1(&problem, &config, &mut *grouped).is_ok());
    }
}
