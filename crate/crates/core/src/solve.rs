//! Root finding for the implicit step equations.
//!
//! [`newton_solve`] is a damped Newton iteration: full steps, halved as
//! needed to respect a domain constraint (for adaptive stepping, `h > 0`) and
//! then further until the residual norm actually decreases.  A step that can
//! do neither within the halving budget is reported as a stall rather than
//! ground down: warm starts from the previous step should keep guesses near
//! the quadratic basin, and anything worse should surface as a failure so the
//! caller can re-seed or fall back.  Jacobians whose 2-norm condition number
//! exceeds [`SINGULAR_CONDITION_THRESHOLD`] are reported as
//! [`SolveError::SingularSystem`] even when the residual happens to vanish:
//! a solution the equations do not pin down locally is not trustworthy.
//!
//! [`minimize_squared_residual`] is the optimisation-flavoured alternative:
//! projected gradient descent with Armijo backtracking on `|r(x)|^2`.  It
//! deliberately mirrors treating the step equations as a least-squares
//! problem instead of a root-finding problem, and inherits that approach's
//! reduced precision; the integrators expose it for comparison runs.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Mat};

/// Condition-number threshold above which a Jacobian is treated as singular.
pub const SINGULAR_CONDITION_THRESHOLD: f64 = 1e12;
/// Maximum constraint-restoring step halvings per Newton iteration.
pub const MAX_STEP_HALVINGS: usize = 30;
/// Relative step for finite-difference Jacobians (scaled by argument size).
pub const FD_STEP: f64 = 1e-6;
/// Default infinity-norm residual tolerance for the implicit equations.
pub const DEFAULT_NEWTON_TOL: f64 = 1e-12;
/// Default Newton iteration cap.
pub const DEFAULT_NEWTON_MAX_ITER: usize = 50;
/// Default gradient-norm tolerance for the squared-residual minimizer.
pub const DEFAULT_GRADIENT_TOL: f64 = 1e-10;
/// Default iteration cap for the squared-residual minimizer.
pub const DEFAULT_DESCENT_MAX_ITER: usize = 400;

/// A square nonlinear system `r(x) = 0` with an optional domain constraint.
///
/// `jacobian` defaults to central finite differences of `residual`;
/// implementors with analytic derivatives should override it.
pub trait ResidualSystem {
    /// Number of unknowns (= number of residual components).
    fn arity(&self) -> usize;

    /// Writes `r(x)` into `out` (`out.len() == arity()`).
    fn residual(&self, x: &[f64], out: &mut [f64]);

    /// Writes `dr_i/dx_j` into `out` (an `arity x arity` matrix).
    fn jacobian(&self, x: &[f64], out: &mut Mat) {
        *out = jacobian_fd(self, x);
    }

    /// Domain predicate; iterates are kept where this holds.
    fn constraint(&self, _x: &[f64]) -> bool {
        true
    }
}

/// What a solve did: for logging alongside each accepted step.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverReport {
    /// Whether the stopping criterion was met.
    pub converged: bool,
    /// Newton updates (or descent steps) performed.
    pub iterations: usize,
    /// Infinity norm of the residual at the returned point.
    pub residual_norm: f64,
    /// 2-norm condition number of the Jacobian at the returned point.
    pub condition_estimate: f64,
    /// Set by the integrators when a fallback produced this step.
    pub fallback_used: bool,
    /// Residual infinity norms per iterate, starting with the guess.
    pub residual_history: Vec<f64>,
}

impl SolverReport {
    /// Report for a state that required no solve (seed states).
    pub fn trivial() -> Self {
        SolverReport {
            converged: true,
            iterations: 0,
            residual_norm: 0.0,
            condition_estimate: f64::NAN,
            fallback_used: false,
            residual_history: Vec::new(),
        }
    }
}

/// Errors from the nonlinear solvers.
#[derive(Clone, Debug, PartialEq)]
pub enum SolveError {
    /// The initial guess violates the domain constraint.
    InvalidGuess,
    /// Iteration budget exhausted (or the constraint blocked every step);
    /// carries the best iterate seen.
    NonConvergence { best: Vec<f64>, report: SolverReport },
    /// Jacobian condition exceeded [`SINGULAR_CONDITION_THRESHOLD`] (or the
    /// linear solve broke down outright).
    SingularSystem { report: SolverReport },
}

impl core::fmt::Display for SolveError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SolveError::InvalidGuess => write!(f, "initial guess violates the domain constraint"),
            SolveError::NonConvergence { report, .. } => write!(
                f,
                "no convergence in {} iterations (residual {})",
                report.iterations, report.residual_norm
            ),
            SolveError::SingularSystem { report } => write!(
                f,
                "singular system: Jacobian condition {} exceeds {}",
                report.condition_estimate, SINGULAR_CONDITION_THRESHOLD
            ),
        }
    }
}

impl core::error::Error for SolveError {}

/// 2-norm condition number of a Jacobian (singular values; infinite when
/// singular or non-finite).
pub fn condition_number(j: &Mat) -> f64 {
    linalg::condition_2norm(j)
}

/// Central finite-difference Jacobian of `sys.residual` at `x`, with per
/// component step `FD_STEP * max(1, |x_j|)`.
pub fn jacobian_fd<S: ResidualSystem + ?Sized>(sys: &S, x: &[f64]) -> Mat {
    let n = sys.arity();
    assert_eq!(x.len(), n, "guess length does not match system arity");
    let mut out = Mat::zeros(n, n);
    let mut xp = x.to_vec();
    let mut rp = vec![0.0; n];
    let mut rm = vec![0.0; n];
    for j in 0..n {
        let step = FD_STEP * 1.0f64.max(crate::math::abs(x[j]));
        xp[j] = x[j] + step;
        sys.residual(&xp, &mut rp);
        xp[j] = x[j] - step;
        sys.residual(&xp, &mut rm);
        xp[j] = x[j];
        for i in 0..n {
            out[(i, j)] = (rp[i] - rm[i]) / (2.0 * step);
        }
    }
    out
}

/// Damped Newton iteration on `r(x) = 0`.
///
/// Stops when the residual infinity norm drops to `tol`; the Jacobian at the
/// accepted point is screened through [`condition_number`] so an
/// ill-conditioned "solution" still errors.  Steps are halved, up to
/// [`MAX_STEP_HALVINGS`] times per iteration, until they both stay in the
/// constraint set and decrease the residual norm.
pub fn newton_solve<S: ResidualSystem + ?Sized>(
    sys: &S,
    guess: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolverReport), SolveError> {
    let n = sys.arity();
    assert_eq!(guess.len(), n, "guess length does not match system arity");
    assert!(tol > 0.0, "tolerance must be positive");
    if !sys.constraint(guess) {
        return Err(SolveError::InvalidGuess);
    }

    let mut x = guess.to_vec();
    let mut r = vec![0.0; n];
    sys.residual(&x, &mut r);
    let mut rnorm = linalg::inf_norm(&r);
    let mut history = vec![rnorm];
    let mut best = (x.clone(), rnorm);
    let mut jac = Mat::zeros(n, n);
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];

    for iteration in 0..=max_iter {
        if rnorm <= tol {
            sys.jacobian(&x, &mut jac);
            let condition = condition_number(&jac);
            let report = SolverReport {
                converged: condition <= SINGULAR_CONDITION_THRESHOLD,
                iterations: iteration,
                residual_norm: rnorm,
                condition_estimate: condition,
                fallback_used: false,
                residual_history: history,
            };
            if condition > SINGULAR_CONDITION_THRESHOLD {
                return Err(SolveError::SingularSystem { report });
            }
            return Ok((x, report));
        }
        if iteration == max_iter {
            break;
        }

        sys.jacobian(&x, &mut jac);
        let condition = condition_number(&jac);
        if condition > SINGULAR_CONDITION_THRESHOLD {
            return Err(SolveError::SingularSystem {
                report: SolverReport {
                    converged: false,
                    iterations: iteration,
                    residual_norm: rnorm,
                    condition_estimate: condition,
                    fallback_used: false,
                    residual_history: history,
                },
            });
        }
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = match linalg::solve_lu(&jac, &neg_r) {
            Some(d) => d,
            None => {
                return Err(SolveError::SingularSystem {
                    report: SolverReport {
                        converged: false,
                        iterations: iteration,
                        residual_norm: rnorm,
                        condition_estimate: f64::INFINITY,
                        fallback_used: false,
                        residual_history: history,
                    },
                })
            }
        };

        // Backtrack until the trial both satisfies the constraint and
        // decreases the residual; a direction that can do neither within the
        // halving budget is a stall, reported with the best iterate seen.
        const DECREASE_SLOPE: f64 = 1e-4;
        let mut scale = 1.0;
        let mut admissible = false;
        let mut trial_norm = f64::INFINITY;
        for _ in 0..=MAX_STEP_HALVINGS {
            for i in 0..n {
                trial[i] = x[i] + scale * delta[i];
            }
            if sys.constraint(&trial) {
                sys.residual(&trial, &mut r_trial);
                trial_norm = linalg::inf_norm(&r_trial);
                if trial_norm <= rnorm * (1.0 - DECREASE_SLOPE * scale) {
                    admissible = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !admissible {
            return Err(SolveError::NonConvergence {
                best: best.0,
                report: SolverReport {
                    converged: false,
                    iterations: iteration,
                    residual_norm: best.1,
                    condition_estimate: condition,
                    fallback_used: false,
                    residual_history: history,
                },
            });
        }

        x.copy_from_slice(&trial);
        r.copy_from_slice(&r_trial);
        rnorm = trial_norm;
        history.push(rnorm);
        if rnorm < best.1 {
            best = (x.clone(), rnorm);
        }
    }

    sys.jacobian(&best.0, &mut jac);
    let condition = condition_number(&jac);
    Err(SolveError::NonConvergence {
        report: SolverReport {
            converged: false,
            iterations: max_iter,
            residual_norm: best.1,
            condition_estimate: condition,
            fallback_used: false,
            residual_history: history,
        },
        best: best.0,
    })
}

/// Projected gradient descent on `phi(x) = |r(x)|^2` with Armijo
/// backtracking; step halving doubles as the projection onto the constraint
/// set.
///
/// Runs to a gradient-norm tolerance or the iteration cap and returns the
/// best iterate either way — lack of convergence here means reduced
/// precision, not failure.  Only an ill-conditioned Jacobian at the accepted
/// point (a minimizer the equations do not isolate) is an error.
pub fn minimize_squared_residual<S: ResidualSystem + ?Sized>(
    sys: &S,
    guess: &[f64],
    gradient_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolverReport), SolveError> {
    let n = sys.arity();
    assert_eq!(guess.len(), n, "guess length does not match system arity");
    assert!(gradient_tol > 0.0, "gradient tolerance must be positive");
    if !sys.constraint(guess) {
        return Err(SolveError::InvalidGuess);
    }

    const ARMIJO_SLOPE: f64 = 1e-4;
    const MAX_BACKTRACKS: usize = 60;

    let mut x = guess.to_vec();
    let mut r = vec![0.0; n];
    let mut jac = Mat::zeros(n, n);
    let mut grad = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];

    sys.residual(&x, &mut r);
    let mut phi: f64 = r.iter().map(|v| v * v).sum();
    let mut history = vec![linalg::inf_norm(&r)];

    let compute_grad = |sys: &S, x: &[f64], r: &[f64], jac: &mut Mat, grad: &mut [f64]| {
        sys.jacobian(x, jac);
        for j in 0..grad.len() {
            grad[j] = 2.0 * (0..r.len()).map(|i| jac[(i, j)] * r[i]).sum::<f64>();
        }
    };
    compute_grad(sys, &x, &r, &mut jac, &mut grad);

    let mut alpha = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let gnorm = linalg::inf_norm(&grad);
        if gnorm <= gradient_tol {
            converged = true;
            break;
        }
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        let mut step = alpha;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = x[i] - step * grad[i];
            }
            if sys.constraint(&trial) {
                sys.residual(&trial, &mut r_trial);
                let phi_trial: f64 = r_trial.iter().map(|v| v * v).sum();
                if phi_trial.is_finite() && phi_trial <= phi - ARMIJO_SLOPE * step * grad_sq {
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // No admissible decrease at any step length: accept the current
            // point as the attainable minimum.
            break;
        }
        x.copy_from_slice(&trial);
        r.copy_from_slice(&r_trial);
        phi = r.iter().map(|v| v * v).sum();
        history.push(linalg::inf_norm(&r));
        compute_grad(sys, &x, &r, &mut jac, &mut grad);
        alpha = (step * 2.0).min(1e6);
        iterations += 1;
    }

    sys.jacobian(&x, &mut jac);
    let condition = condition_number(&jac);
    let report = SolverReport {
        converged: converged && condition <= SINGULAR_CONDITION_THRESHOLD,
        iterations,
        residual_norm: linalg::inf_norm(&r),
        condition_estimate: condition,
        fallback_used: false,
        residual_history: history,
    };
    if condition > SINGULAR_CONDITION_THRESHOLD {
        return Err(SolveError::SingularSystem { report });
    }
    Ok((x, report))
}
