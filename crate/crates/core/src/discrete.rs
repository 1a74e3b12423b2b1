//! Discrete building blocks: the midpoint discrete Lagrangian on a time
//! interval, its exact partial derivatives, and the discrete force/power
//! terms that carry non-conservative effects into the update maps.
//!
//! For a pair `(t0, q0) -> (t1, q1)` with `h = t1 - t0`, midpoint
//! `qm = (q0 + q1) / 2`, `tm = (t0 + t1) / 2` and velocity `v = (q1 - q0) / h`
//! the discrete Lagrangian is the one-point quadrature
//!
//! ```text
//! Ld = h * L(tm, qm, v)
//! ```
//!
//! Differentiating through the quadrature gives the four maps used by the
//! steppers (all Lagrangian derivatives evaluated at `(tm, qm, v)`):
//!
//! ```text
//! d/dt0 Ld = -L + (h/2) dL/dt + dL/dv . v        d/dq0 Ld = (h/2) dL/dq - dL/dv
//! d/dt1 Ld =  L + (h/2) dL/dt - dL/dv . v        d/dq1 Ld = (h/2) dL/dq + dL/dv
//! ```
//!
//! A force `f(t, q, v)` is split symmetrically across the interval ends,
//! `f- = f+ = (h/2) f(tm, qm, v)`, with matching power terms
//! `g- = g+ = -(h/2) f . v`.  Discrete momentum and energy at the right end
//! of a pair are then `p = d/dq1 Ld + f+` and `E = -d/dt1 Ld - g+`.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{ModelError, SystemSpec};

/// Errors from assembling a discrete interval.
#[derive(Clone, Debug, PartialEq)]
pub enum PairError {
    /// Times must satisfy `t1 > t0`.
    NonMonotonicTimes { t0: f64, t1: f64 },
    /// All entries must be finite.
    NonFinite,
    /// Endpoint positions must have the same, nonzero length.
    DimensionMismatch { q0: usize, q1: usize },
}

impl core::fmt::Display for PairError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PairError::NonMonotonicTimes { t0, t1 } => {
                write!(f, "pair times must increase: t0 = {t0}, t1 = {t1}")
            }
            PairError::NonFinite => write!(f, "pair entries must be finite"),
            PairError::DimensionMismatch { q0, q1 } => {
                write!(f, "pair endpoint dimensions differ: {q0} vs {q1}")
            }
        }
    }
}

impl core::error::Error for PairError {}

/// A validated discrete interval `(t0, q0) -> (t1, q1)` with `t1 > t0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePair {
    t0: f64,
    q0: Vec<f64>,
    t1: f64,
    q1: Vec<f64>,
}

impl DiscretePair {
    pub fn new(t0: f64, q0: Vec<f64>, t1: f64, q1: Vec<f64>) -> Result<Self, PairError> {
        if q0.is_empty() || q0.len() != q1.len() {
            return Err(PairError::DimensionMismatch {
                q0: q0.len(),
                q1: q1.len(),
            });
        }
        if !(t0.is_finite() && t1.is_finite())
            || q0.iter().chain(q1.iter()).any(|x| !x.is_finite())
        {
            return Err(PairError::NonFinite);
        }
        if t1 <= t0 {
            return Err(PairError::NonMonotonicTimes { t0, t1 });
        }
        Ok(DiscretePair { t0, q0, t1, q1 })
    }

    /// One-dimensional shorthand.
    pub fn scalar(t0: f64, q0: f64, t1: f64, q1: f64) -> Result<Self, PairError> {
        DiscretePair::new(t0, vec![q0], t1, vec![q1])
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn q0(&self) -> &[f64] {
        &self.q0
    }

    pub fn q1(&self) -> &[f64] {
        &self.q1
    }

    pub fn dim(&self) -> usize {
        self.q0.len()
    }

    /// Step length `t1 - t0` (strictly positive).
    pub fn h(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn midpoint_time(&self) -> f64 {
        0.5 * (self.t0 + self.t1)
    }

    pub fn midpoint_position(&self) -> Vec<f64> {
        self.q0
            .iter()
            .zip(&self.q1)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// Finite-difference velocity `(q1 - q0) / h`.
    pub fn velocity(&self) -> Vec<f64> {
        let h = self.h();
        self.q0
            .iter()
            .zip(&self.q1)
            .map(|(a, b)| (b - a) / h)
            .collect()
    }
}

/// Partial derivatives of the discrete Lagrangian with respect to
/// `(t0, q0, t1, q1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteGradients {
    pub dt0: f64,
    pub dq0: Vec<f64>,
    pub dt1: f64,
    pub dq1: Vec<f64>,
}

/// Midpoint data shared by every map below.
struct MidState {
    h: f64,
    t: f64,
    q: Vec<f64>,
    v: Vec<f64>,
}

fn mid_state(sys: &SystemSpec, pair: &DiscretePair) -> MidState {
    assert_eq!(
        sys.dim(),
        pair.dim(),
        "system dimension {} does not match pair dimension {}",
        sys.dim(),
        pair.dim()
    );
    MidState {
        h: pair.h(),
        t: pair.midpoint_time(),
        q: pair.midpoint_position(),
        v: pair.velocity(),
    }
}

/// Midpoint discrete Lagrangian `h * L(tm, qm, v)`.
pub fn discrete_lagrangian(sys: &SystemSpec, pair: &DiscretePair) -> f64 {
    let m = mid_state(sys, pair);
    m.h * sys.lagrangian(m.t, &m.q, &m.v)
}

/// All four partials of the discrete Lagrangian in one evaluation.
pub fn discrete_gradients(sys: &SystemSpec, pair: &DiscretePair) -> DiscreteGradients {
    let m = mid_state(sys, pair);
    let dim = m.q.len();
    let l = sys.lagrangian(m.t, &m.q, &m.v);
    let lt = sys.dl_dt(m.t, &m.q, &m.v);
    let mut lq = vec![0.0; dim];
    let mut lv = vec![0.0; dim];
    sys.dl_dq(m.t, &m.q, &m.v, &mut lq);
    sys.dl_dv(m.t, &m.q, &m.v, &mut lv);
    let lv_dot_v: f64 = lv.iter().zip(&m.v).map(|(a, b)| a * b).sum();

    DiscreteGradients {
        dt0: -l + 0.5 * m.h * lt + lv_dot_v,
        dq0: lq
            .iter()
            .zip(&lv)
            .map(|(q, v)| 0.5 * m.h * q - v)
            .collect(),
        dt1: l + 0.5 * m.h * lt - lv_dot_v,
        dq1: lq
            .iter()
            .zip(&lv)
            .map(|(q, v)| 0.5 * m.h * q + v)
            .collect(),
    }
}

/// Discrete force pair `(f-, f+)`, both equal to `(h/2) f(tm, qm, v)` under
/// the symmetric midpoint split.  Errors with [`ModelError::NoForce`] for a
/// conservative system.
pub fn discrete_forces(
    sys: &SystemSpec,
    pair: &DiscretePair,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let m = mid_state(sys, pair);
    let mut f = vec![0.0; m.q.len()];
    sys.force(m.t, &m.q, &m.v, &mut f)?;
    let half: Vec<f64> = f.iter().map(|x| 0.5 * m.h * x).collect();
    Ok((half.clone(), half))
}

/// Discrete power pair `(g-, g+)`, both equal to `-(h/2) f . v`.  Errors with
/// [`ModelError::NoForce`] for a conservative system.
pub fn discrete_powers(sys: &SystemSpec, pair: &DiscretePair) -> Result<(f64, f64), ModelError> {
    let m = mid_state(sys, pair);
    let mut f = vec![0.0; m.q.len()];
    sys.force(m.t, &m.q, &m.v, &mut f)?;
    let g = -0.5 * m.h * f.iter().zip(&m.v).map(|(a, b)| a * b).sum::<f64>();
    Ok((g, g))
}

/// Discrete momentum at the right end of the pair: `d/dq1 Ld`, plus `f+` when
/// the system carries a force.
pub fn discrete_momentum(sys: &SystemSpec, pair: &DiscretePair) -> Vec<f64> {
    let grads = discrete_gradients(sys, pair);
    let mut p = grads.dq1;
    if sys.has_force() {
        let (_, f_plus) = discrete_forces(sys, pair).expect("has_force checked");
        for (pi, fi) in p.iter_mut().zip(&f_plus) {
            *pi += fi;
        }
    }
    p
}

/// Discrete energy at the right end of the pair: `-d/dt1 Ld`, minus `g+` when
/// the system carries a force.
pub fn discrete_energy(sys: &SystemSpec, pair: &DiscretePair) -> f64 {
    let grads = discrete_gradients(sys, pair);
    let mut e = -grads.dt1;
    if sys.has_force() {
        let (_, g_plus) = discrete_powers(sys, pair).expect("has_force checked");
        e -= g_plus;
    }
    e
}

/// Discrete momentum at the left end of the pair: `-d/dq0 Ld - f-`.  This is
/// the value the implicit half of the update matches against the incoming
/// momentum; it is exposed for seeding logs.
pub fn discrete_momentum_left(sys: &SystemSpec, pair: &DiscretePair) -> Vec<f64> {
    let grads = discrete_gradients(sys, pair);
    let mut p: Vec<f64> = grads.dq0.iter().map(|x| -x).collect();
    if sys.has_force() {
        let (f_minus, _) = discrete_forces(sys, pair).expect("has_force checked");
        for (pi, fi) in p.iter_mut().zip(&f_minus) {
            *pi -= fi;
        }
    }
    p
}

/// Discrete energy at the left end of the pair: `d/dt0 Ld + g-`.  Exposed for
/// seeding logs, mirroring [`discrete_momentum_left`].
pub fn discrete_energy_left(sys: &SystemSpec, pair: &DiscretePair) -> f64 {
    let grads = discrete_gradients(sys, pair);
    let mut e = grads.dt0;
    if sys.has_force() {
        let (g_minus, _) = discrete_powers(sys, pair).expect("has_force checked");
        e += g_minus;
    }
    e
}
