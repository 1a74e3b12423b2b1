//! Post-run analysis of trajectory logs.
//!
//! Everything here is derived from a [`TrajectoryLog`] after the fact; nothing
//! feeds back into stepping.  The two energy-error notions are:
//!
//! * **discrete energy error** — how well the discrete energy honours its own
//!   conservation law.  Without forcing this is drift relative to the first
//!   stepped state; with forcing it is the violation of the per-interval
//!   energy balance, recomputed from consecutive states.
//! * **discretization error** — the gap between the discrete energy and the
//!   continuous energy of the reference solution at the same time.  This is
//!   an O(h^2) offset intrinsic to the discretisation and does not shrink
//!   with solver effort.

use alloc::vec;
use alloc::vec::Vec;

use crate::discrete::{discrete_gradients, discrete_powers, DiscretePair};
use crate::integrators::{run, IntegratorConfig, RunError, TrajectoryLog};
use crate::model::{continuous_energy, ModelError, ReferencePath, SystemSpec};

/// Per-state energy columns aligned with the log records.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySeries {
    pub t: Vec<f64>,
    pub e_discrete: Vec<f64>,
    pub e_continuous: Vec<f64>,
    pub discrete_energy_error: Vec<f64>,
    pub discretization_error: Vec<f64>,
}

/// The discrete-energy-error column alone; needs no reference solution.
///
/// Without forcing, entry `k` is `|E_k - E_1|`.  With forcing, entry `k >= 2`
/// is the absolute violation of the interval energy balance that produced
/// state `k`, and the seed entries are zero.
pub fn discrete_energy_drift(sys: &SystemSpec, log: &TrajectoryLog) -> Vec<f64> {
    let n = log.len();
    let mut out = vec![0.0; n];
    if sys.has_force() {
        for (k, slot) in out.iter_mut().enumerate().skip(2) {
            let a = &log.records[k - 1].state;
            let b = &log.records[k].state;
            let pair = DiscretePair::new(a.t, a.q.clone(), b.t, b.q.clone())
                .expect("logged states are finite with increasing times");
            let grads = discrete_gradients(sys, &pair);
            let (g_minus, _) = discrete_powers(sys, &pair).expect("system is forced");
            *slot = (grads.dt0 + g_minus - a.energy).abs();
        }
    } else {
        let e1 = log.records[1].state.energy;
        for (slot, rec) in out.iter_mut().zip(&log.records) {
            *slot = (rec.state.energy - e1).abs();
        }
    }
    out
}

/// Builds the full energy table for a log, evaluating the reference solution
/// at every logged time.
pub fn energy_report(sys: &SystemSpec, log: &TrajectoryLog) -> Result<EnergySeries, ModelError> {
    let mut path = ReferencePath::new(sys, &log.metadata.initial_condition)?;
    let n = log.len();
    let discrete_energy_error = discrete_energy_drift(sys, log);
    let mut t = Vec::with_capacity(n);
    let mut e_discrete = Vec::with_capacity(n);
    let mut e_continuous = Vec::with_capacity(n);
    let mut discretization_error = Vec::with_capacity(n);
    for rec in &log.records {
        let (q_ref, v_ref) = path.advance_to(rec.state.t)?;
        let e_cont = continuous_energy(sys, rec.state.t, &q_ref, &v_ref);
        t.push(rec.state.t);
        e_discrete.push(rec.state.energy);
        e_continuous.push(e_cont);
        discretization_error.push((rec.state.energy - e_cont).abs());
    }
    Ok(EnergySeries { t, e_discrete, e_continuous, discrete_energy_error, discretization_error })
}

/// The `(k, h_k)` series of realised steps, one entry per stepped state.
pub fn step_history(log: &TrajectoryLog) -> Vec<(usize, f64)> {
    log.records.iter().skip(1).map(|rec| (rec.state.k, rec.h)).collect()
}

/// Largest position gap between the discrete trajectory and the reference,
/// measured at interval midpoints where the midpoint discretisation is most
/// accurate: `max_k | (q_k + q_{k+1})/2 - q_ref((t_k + t_{k+1})/2) |` in the
/// max norm over components.
pub fn trajectory_error(sys: &SystemSpec, log: &TrajectoryLog) -> Result<f64, ModelError> {
    let mut path = ReferencePath::new(sys, &log.metadata.initial_condition)?;
    let mut worst = 0.0_f64;
    for pair in log.records.windows(2) {
        let (a, b) = (&pair[0].state, &pair[1].state);
        let t_mid = 0.5 * (a.t + b.t);
        let (q_ref, _) = path.advance_to(t_mid)?;
        for (i, qr) in q_ref.iter().enumerate() {
            let q_mid = 0.5 * (a.q[i] + b.q[i]);
            worst = worst.max((q_mid - qr).abs());
        }
    }
    Ok(worst)
}

/// Least-squares slope of `ln(error)` against `ln(h)`.
///
/// Returns `None` for degenerate inputs: fewer than two samples, nonpositive
/// or non-finite entries, or no spread in `h`.
pub fn fit_order(samples: &[(f64, f64)]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for &(h, err) in samples {
        if !(h.is_finite() && h > 0.0 && err.is_finite() && err > 0.0) {
            return None;
        }
        xs.push(crate::math::ln(h));
        ys.push(crate::math::ln(err));
    }
    let n = samples.len() as f64;
    let x_bar = xs.iter().sum::<f64>() / n;
    let y_bar = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - x_bar) * (x - x_bar);
        sxy += (x - x_bar) * (y - y_bar);
    }
    if sxx <= 1e-24 {
        return None;
    }
    let slope = sxy / sxx;
    slope.is_finite().then_some(slope)
}

/// Samples and fitted slope from a family of fixed-step runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceStudy {
    /// `(h, trajectory_error)` per run.
    pub samples: Vec<(f64, f64)>,
    /// Fitted order, or `None` if the samples were degenerate.
    pub order: Option<f64>,
}

/// Runs the fixed stepper at each step size to `end_time` and fits the order
/// of the midpoint trajectory error.
pub fn convergence_order(
    sys: &SystemSpec,
    ic: &crate::model::InitialCondition,
    steps: &[f64],
    end_time: f64,
) -> Result<ConvergenceStudy, RunError> {
    let mut samples = Vec::with_capacity(steps.len());
    for &h in steps {
        let mut config = IntegratorConfig::fixed(h, crate::integrators::Horizon::EndTime(end_time));
        config.forced = sys.has_force();
        let log = run(sys, ic, &config)?;
        let err = trajectory_error(sys, &log).map_err(RunError::Model)?;
        samples.push((h, err));
    }
    let order = fit_order(&samples);
    Ok(ConvergenceStudy { samples, order })
}

/// Outcome class of one sweep entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepStatus {
    Ok,
    SolverFailure,
    GuardViolation,
    Invalid,
}

impl SweepStatus {
    pub fn label(&self) -> &'static str {
        match self {
            SweepStatus::Ok => "ok",
            SweepStatus::SolverFailure => "solver-failure",
            SweepStatus::GuardViolation => "guard-violation",
            SweepStatus::Invalid => "invalid",
        }
    }
}

/// One row of a base-step sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSample {
    pub h0: f64,
    /// Largest condition estimate over the solved steps, `NaN` if none ran.
    pub max_condition: f64,
    /// Largest discrete energy error over the log, `NaN` if none ran.
    pub max_discrete_energy_error: f64,
    pub status: SweepStatus,
}

/// Reruns `base` at each `h0` and collects the worst conditioning and energy
/// error per run.  Failed runs contribute their partial logs.
pub fn condition_study(
    sys: &SystemSpec,
    ic: &crate::model::InitialCondition,
    base: &IntegratorConfig,
    h0_list: &[f64],
) -> Vec<ConditionSample> {
    h0_list
        .iter()
        .map(|&h0| {
            let mut config = base.clone();
            config.h0 = h0;
            let (log, status) = match run(sys, ic, &config) {
                Ok(log) => (Some(log), SweepStatus::Ok),
                Err(RunError::Solver { log, .. }) => (Some(*log), SweepStatus::SolverFailure),
                Err(RunError::GuardViolation { log, .. }) => {
                    (Some(*log), SweepStatus::GuardViolation)
                }
                Err(_) => (None, SweepStatus::Invalid),
            };
            match log {
                Some(log) => {
                    let max_condition = log.records[2..]
                        .iter()
                        .map(|rec| rec.report.condition_estimate)
                        .filter(|c| c.is_finite())
                        .fold(f64::NAN, f64::max);
                    let max_drift = discrete_energy_drift(sys, &log)
                        .into_iter()
                        .fold(f64::NAN, f64::max);
                    ConditionSample {
                        h0,
                        max_condition,
                        max_discrete_energy_error: max_drift,
                        status,
                    }
                }
                None => ConditionSample {
                    h0,
                    max_condition: f64::NAN,
                    max_discrete_energy_error: f64::NAN,
                    status,
                },
            }
        })
        .collect()
}
