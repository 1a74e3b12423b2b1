//! Continuous problem definitions: Lagrangians, optional forcing, initial
//! data, and reference solutions used to seed and to judge the integrators.
//!
//! A [`SystemSpec`] carries the Lagrangian and its first partials as closures,
//! plus (optionally) second partials and force Jacobians so the implicit step
//! equations get analytic Newton matrices.  Two built-in systems cover the
//! study problems:
//!
//! * [`double_well`] — unit-scale particle in `V(q) = (q^4 - q^2) / 2`,
//!   conservative;
//! * [`damped_oscillator`] — linear spring with viscous force `f = -c v`.
//!
//! Reference solutions are exposed through [`ReferencePath`], a sequential
//! evaluator: closed-form for the oscillator (underdamped regime), and a
//! classical fourth-order Runge-Kutta benchmark at a capped substep for the
//! double well.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Mat;
use crate::math;

/// Scalar-valued function of `(t, q, v)`.
pub type ScalarFn = Box<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// Vector-valued function of `(t, q, v)`; writes its result into the slice.
pub type VectorFn = Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Matrix-valued function of `(t, q, v)`; writes its result into the matrix.
pub type MatrixFn = Box<dyn Fn(f64, &[f64], &[f64], &mut Mat) + Send + Sync>;

/// Maximum substep of the Runge-Kutta reference benchmark.
pub const REFERENCE_MAX_SUBSTEP: f64 = 1e-5;

/// Errors from system construction and reference evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// A constructor argument is out of range or non-finite.
    InvalidParameter { name: &'static str, value: f64 },
    /// Vector lengths disagree with the system dimension.
    DimensionMismatch { expected: usize, got: usize },
    /// The oscillator closed form only covers the oscillatory regime
    /// `zeta^2 < 1`.
    UnsupportedRegime { zeta: f64 },
    /// No reference solution is available for this system.
    NoReference,
    /// A forced-system operation was applied to a conservative system.
    NoForce,
    /// The Runge-Kutta reference path only advances forward in time.
    BackwardQuery { current: f64, requested: f64 },
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::InvalidParameter { name, value } => {
                write!(f, "invalid parameter {name} = {value}")
            }
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            ModelError::UnsupportedRegime { zeta } => {
                write!(f, "damping ratio {zeta} outside the oscillatory regime |zeta| < 1")
            }
            ModelError::NoReference => write!(f, "no reference solution for this system"),
            ModelError::NoForce => write!(f, "system has no force term"),
            ModelError::BackwardQuery { current, requested } => {
                write!(f, "reference path at t = {current} cannot rewind to t = {requested}")
            }
        }
    }
}

impl core::error::Error for ModelError {}

/// Identifies which built-in (if any) a `SystemSpec` came from, so reference
/// solutions and metadata can be selected without inspecting closures.
#[derive(Clone, Debug, PartialEq)]
pub enum SystemKind {
    DoubleWell { m: f64 },
    DampedOscillator { m: f64, k: f64, c: f64 },
    Custom,
}

impl SystemKind {
    /// Short machine-friendly name for logs and metadata.
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::DoubleWell { .. } => "double-well",
            SystemKind::DampedOscillator { .. } => "damped-oscillator",
            SystemKind::Custom => "custom",
        }
    }
}

/// Second partial derivatives of the Lagrangian, used to assemble analytic
/// Newton matrices for the implicit step equations.
pub struct SecondPartials {
    /// `(i, j)` entry is `d2L / dq_i dq_j`.
    pub d2l_dq2: MatrixFn,
    /// `(i, j)` entry is `d2L / dq_i dv_j`.
    pub d2l_dqdv: MatrixFn,
    /// `(i, j)` entry is `d2L / dv_i dv_j`.
    pub d2l_dv2: MatrixFn,
    /// `d2L / dt dq_i`.
    pub d2l_dtdq: VectorFn,
    /// `d2L / dt dv_i`.
    pub d2l_dtdv: VectorFn,
    /// `d2L / dt2`.
    pub d2l_dt2: ScalarFn,
}

impl SecondPartials {
    /// Convenience constructor for time-independent Lagrangians: the three
    /// time-crossed blocks are zero.
    pub fn time_independent(d2l_dq2: MatrixFn, d2l_dqdv: MatrixFn, d2l_dv2: MatrixFn) -> Self {
        SecondPartials {
            d2l_dq2,
            d2l_dqdv,
            d2l_dv2,
            d2l_dtdq: Box::new(|_, _, _, out| out.fill(0.0)),
            d2l_dtdv: Box::new(|_, _, _, out| out.fill(0.0)),
            d2l_dt2: Box::new(|_, _, _| 0.0),
        }
    }
}

/// Jacobian of the force with respect to its arguments.
pub struct ForceJacobian {
    /// `(i, j)` entry is `df_i / dq_j`.
    pub df_dq: MatrixFn,
    /// `(i, j)` entry is `df_i / dv_j`.
    pub df_dv: MatrixFn,
    /// `df_i / dt`.
    pub df_dt: VectorFn,
}

impl ForceJacobian {
    /// Convenience constructor for forces depending on velocity only.
    pub fn velocity_only(df_dv: MatrixFn) -> Self {
        ForceJacobian {
            df_dq: Box::new(|_, _, _, out| zero_mat(out)),
            df_dv,
            df_dt: Box::new(|_, _, _, out| out.fill(0.0)),
        }
    }
}

fn zero_mat(m: &mut Mat) {
    let (r, c) = (m.rows(), m.cols());
    for i in 0..r {
        for j in 0..c {
            m[(i, j)] = 0.0;
        }
    }
}

/// A Lagrangian system: `L(t, q, v)` with first partials, an optional force,
/// and optional analytic curvature data.
///
/// Values are immutable after construction and safe to share across
/// concurrent runs (all closures are `Send + Sync`).
pub struct SystemSpec {
    dim: usize,
    kind: SystemKind,
    params: Vec<(String, f64)>,
    lagrangian: ScalarFn,
    dl_dt: ScalarFn,
    dl_dq: VectorFn,
    dl_dv: VectorFn,
    force: Option<VectorFn>,
    second: Option<SecondPartials>,
    force_jac: Option<ForceJacobian>,
}

impl SystemSpec {
    /// Builds a custom system from a Lagrangian and its first partials.
    pub fn new(
        dim: usize,
        lagrangian: ScalarFn,
        dl_dt: ScalarFn,
        dl_dq: VectorFn,
        dl_dv: VectorFn,
    ) -> Self {
        SystemSpec {
            dim,
            kind: SystemKind::Custom,
            params: Vec::new(),
            lagrangian,
            dl_dt,
            dl_dq,
            dl_dv,
            force: None,
            second: None,
            force_jac: None,
        }
    }

    pub fn with_force(mut self, force: VectorFn) -> Self {
        self.force = Some(force);
        self
    }

    pub fn with_second_partials(mut self, second: SecondPartials) -> Self {
        self.second = Some(second);
        self
    }

    pub fn with_force_jacobian(mut self, jac: ForceJacobian) -> Self {
        self.force_jac = Some(jac);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    /// Named scalar parameters, for metadata and logs.
    pub fn parameters(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn lagrangian(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        (self.lagrangian)(t, q, v)
    }

    pub fn dl_dt(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        (self.dl_dt)(t, q, v)
    }

    pub fn dl_dq(&self, t: f64, q: &[f64], v: &[f64], out: &mut [f64]) {
        (self.dl_dq)(t, q, v, out)
    }

    pub fn dl_dv(&self, t: f64, q: &[f64], v: &[f64], out: &mut [f64]) {
        (self.dl_dv)(t, q, v, out)
    }

    pub fn has_force(&self) -> bool {
        self.force.is_some()
    }

    /// Evaluates the force, or reports [`ModelError::NoForce`] for a
    /// conservative system.
    pub fn force(&self, t: f64, q: &[f64], v: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        match &self.force {
            Some(f) => {
                f(t, q, v, out);
                Ok(())
            }
            None => Err(ModelError::NoForce),
        }
    }

    pub fn second_partials(&self) -> Option<&SecondPartials> {
        self.second.as_ref()
    }

    pub fn force_jacobian(&self) -> Option<&ForceJacobian> {
        self.force_jac.as_ref()
    }
}

/// Particle of mass `m` in the double-well potential `V(q) = (q^4 - q^2) / 2`.
///
/// `L = m v^2 / 2 - V(q)`; conservative.  Requires `m > 0`.
pub fn double_well(m: f64) -> Result<SystemSpec, ModelError> {
    if !(m.is_finite() && m > 0.0) {
        return Err(ModelError::InvalidParameter { name: "m", value: m });
    }
    let mut sys = SystemSpec::new(
        1,
        Box::new(move |_t, q, v| 0.5 * m * v[0] * v[0] - double_well_potential(q[0])),
        Box::new(|_, _, _| 0.0),
        Box::new(|_t, q, _v, out: &mut [f64]| out[0] = -(2.0 * q[0] * q[0] * q[0] - q[0])),
        Box::new(move |_t, _q, v, out: &mut [f64]| out[0] = m * v[0]),
    );
    sys.kind = SystemKind::DoubleWell { m };
    sys.params = vec![(String::from("m"), m)];
    Ok(sys.with_second_partials(SecondPartials::time_independent(
        Box::new(|_t, q, _v, out: &mut Mat| out[(0, 0)] = -(6.0 * q[0] * q[0] - 1.0)),
        Box::new(|_, _, _, out: &mut Mat| out[(0, 0)] = 0.0),
        Box::new(move |_, _, _, out: &mut Mat| out[(0, 0)] = m),
    )))
}

fn double_well_potential(q: f64) -> f64 {
    0.5 * (q * q * q * q - q * q)
}

/// Linear oscillator of mass `m` and stiffness `k` with viscous force
/// `f = -c v` (any sign of `c`; `c = 0` keeps a zero force term).
///
/// `L = m v^2 / 2 - k q^2 / 2`.  Requires `m > 0`, `k > 0`, finite `c`.
pub fn damped_oscillator(m: f64, k: f64, c: f64) -> Result<SystemSpec, ModelError> {
    if !(m.is_finite() && m > 0.0) {
        return Err(ModelError::InvalidParameter { name: "m", value: m });
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(ModelError::InvalidParameter { name: "k", value: k });
    }
    if !c.is_finite() {
        return Err(ModelError::InvalidParameter { name: "c", value: c });
    }
    let mut sys = SystemSpec::new(
        1,
        Box::new(move |_t, q, v| 0.5 * m * v[0] * v[0] - 0.5 * k * q[0] * q[0]),
        Box::new(|_, _, _| 0.0),
        Box::new(move |_t, q, _v, out: &mut [f64]| out[0] = -k * q[0]),
        Box::new(move |_t, _q, v, out: &mut [f64]| out[0] = m * v[0]),
    );
    sys.kind = SystemKind::DampedOscillator { m, k, c };
    sys.params = vec![
        (String::from("m"), m),
        (String::from("k"), k),
        (String::from("c"), c),
    ];
    Ok(sys
        .with_force(Box::new(move |_t, _q, v, out: &mut [f64]| out[0] = -c * v[0]))
        .with_second_partials(SecondPartials::time_independent(
            Box::new(move |_, _, _, out: &mut Mat| out[(0, 0)] = -k),
            Box::new(|_, _, _, out: &mut Mat| out[(0, 0)] = 0.0),
            Box::new(move |_, _, _, out: &mut Mat| out[(0, 0)] = m),
        ))
        .with_force_jacobian(ForceJacobian::velocity_only(Box::new(
            move |_, _, _, out: &mut Mat| out[(0, 0)] = -c,
        ))))
}

/// Energy of the continuous system: `E = v . dL/dv - L`.
pub fn continuous_energy(sys: &SystemSpec, t: f64, q: &[f64], v: &[f64]) -> f64 {
    let mut lv = vec![0.0; sys.dim()];
    sys.dl_dv(t, q, v, &mut lv);
    let kinetic_pairing: f64 = lv.iter().zip(v).map(|(a, b)| a * b).sum();
    kinetic_pairing - sys.lagrangian(t, q, v)
}

/// Initial data `(t0, q0, v0)`; all entries finite, `q0` and `v0` the same
/// length.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialCondition {
    pub t0: f64,
    pub q0: Vec<f64>,
    pub v0: Vec<f64>,
}

impl InitialCondition {
    pub fn new(t0: f64, q0: Vec<f64>, v0: Vec<f64>) -> Result<Self, ModelError> {
        if !t0.is_finite() {
            return Err(ModelError::InvalidParameter { name: "t0", value: t0 });
        }
        if q0.is_empty() || q0.len() != v0.len() {
            return Err(ModelError::DimensionMismatch {
                expected: q0.len(),
                got: v0.len(),
            });
        }
        for &x in q0.iter().chain(v0.iter()) {
            if !x.is_finite() {
                return Err(ModelError::InvalidParameter { name: "q0/v0", value: x });
            }
        }
        Ok(InitialCondition { t0, q0, v0 })
    }

    /// One-dimensional shorthand.
    pub fn scalar(t0: f64, q0: f64, v0: f64) -> Result<Self, ModelError> {
        InitialCondition::new(t0, vec![q0], vec![v0])
    }

    pub fn dim(&self) -> usize {
        self.q0.len()
    }
}

enum PathInner {
    /// Underdamped closed form `q = e^{-zeta wn t} (A cos wd t + B sin wd t)`.
    Oscillator {
        t0: f64,
        a: f64,
        b: f64,
        decay: f64,
        wd: f64,
    },
    /// Fourth-order Runge-Kutta benchmark with substep capped at
    /// [`REFERENCE_MAX_SUBSTEP`]; advances monotonically.
    RungeKutta {
        accel: VectorFn,
        t: f64,
        q: Vec<f64>,
        v: Vec<f64>,
        max_substep: f64,
    },
}

/// Sequential evaluator of the reference solution through an initial
/// condition.
///
/// The oscillator path is exact and accepts arbitrary query times; the
/// Runge-Kutta path integrates forward and therefore requires nondecreasing
/// query times.
pub struct ReferencePath {
    inner: PathInner,
}

impl ReferencePath {
    pub fn new(sys: &SystemSpec, ic: &InitialCondition) -> Result<Self, ModelError> {
        if ic.dim() != sys.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: sys.dim(),
                got: ic.dim(),
            });
        }
        match *sys.kind() {
            SystemKind::DampedOscillator { m, k, c } => {
                let wn = math::sqrt(k / m);
                let zeta = c / (2.0 * math::sqrt(k * m));
                if zeta * zeta >= 1.0 {
                    return Err(ModelError::UnsupportedRegime { zeta });
                }
                let wd = wn * math::sqrt(1.0 - zeta * zeta);
                let a = ic.q0[0];
                let b = (ic.v0[0] + zeta * wn * ic.q0[0]) / wd;
                Ok(ReferencePath {
                    inner: PathInner::Oscillator {
                        t0: ic.t0,
                        a,
                        b,
                        decay: zeta * wn,
                        wd,
                    },
                })
            }
            SystemKind::DoubleWell { m } => Ok(ReferencePath {
                inner: PathInner::RungeKutta {
                    accel: Box::new(move |_t, q, _v, out: &mut [f64]| {
                        out[0] = (q[0] - 2.0 * q[0] * q[0] * q[0]) / m;
                    }),
                    t: ic.t0,
                    q: ic.q0.clone(),
                    v: ic.v0.clone(),
                    max_substep: REFERENCE_MAX_SUBSTEP,
                },
            }),
            SystemKind::Custom => Err(ModelError::NoReference),
        }
    }

    /// Method name for run metadata.
    pub fn method(&self) -> &'static str {
        match self.inner {
            PathInner::Oscillator { .. } => "closed-form",
            PathInner::RungeKutta { .. } => "rk4",
        }
    }

    /// Substep cap for run metadata (`None` for the exact closed form).
    pub fn max_substep(&self) -> Option<f64> {
        match self.inner {
            PathInner::Oscillator { .. } => None,
            PathInner::RungeKutta { max_substep, .. } => Some(max_substep),
        }
    }

    /// State `(q, v)` of the reference solution at time `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        match &mut self.inner {
            PathInner::Oscillator { t0, a, b, decay, wd } => {
                let s = t - *t0;
                let env = math::exp(-*decay * s);
                let (sin, cos) = (math::sin(*wd * s), math::cos(*wd * s));
                let q = env * (*a * cos + *b * sin);
                let v = env * ((*b * *wd - *a * *decay) * cos - (*a * *wd + *b * *decay) * sin);
                Ok((vec![q], vec![v]))
            }
            PathInner::RungeKutta {
                accel,
                t: cur,
                q,
                v,
                max_substep,
            } => {
                let dt = t - *cur;
                if dt < 0.0 {
                    return Err(ModelError::BackwardQuery {
                        current: *cur,
                        requested: t,
                    });
                }
                if dt > 0.0 {
                    let n = math::ceil(dt / *max_substep) as usize;
                    let h = dt / n as f64;
                    let dim = q.len();
                    // Stage slopes: kNq for position, aN for velocity.
                    let mut a1 = vec![0.0; dim];
                    let mut a2 = vec![0.0; dim];
                    let mut a3 = vec![0.0; dim];
                    let mut a4 = vec![0.0; dim];
                    let mut k2q = vec![0.0; dim];
                    let mut k3q = vec![0.0; dim];
                    let mut k4q = vec![0.0; dim];
                    let mut qs = vec![0.0; dim];
                    for i in 0..n {
                        let ts = *cur + i as f64 * h;
                        accel(ts, q, v, &mut a1);
                        for j in 0..dim {
                            qs[j] = q[j] + 0.5 * h * v[j];
                            k2q[j] = v[j] + 0.5 * h * a1[j];
                        }
                        accel(ts + 0.5 * h, &qs, &k2q, &mut a2);
                        for j in 0..dim {
                            qs[j] = q[j] + 0.5 * h * k2q[j];
                            k3q[j] = v[j] + 0.5 * h * a2[j];
                        }
                        accel(ts + 0.5 * h, &qs, &k3q, &mut a3);
                        for j in 0..dim {
                            qs[j] = q[j] + h * k3q[j];
                            k4q[j] = v[j] + h * a3[j];
                        }
                        accel(ts + h, &qs, &k4q, &mut a4);
                        for j in 0..dim {
                            q[j] += h / 6.0 * (v[j] + 2.0 * k2q[j] + 2.0 * k3q[j] + k4q[j]);
                            v[j] += h / 6.0 * (a1[j] + 2.0 * a2[j] + 2.0 * a3[j] + a4[j]);
                        }
                    }
                    *cur = t;
                }
                Ok((q.clone(), v.clone()))
            }
        }
    }
}

/// One-shot reference state at time `t` (builds a path and advances it).
pub fn reference_state(
    sys: &SystemSpec,
    ic: &InitialCondition,
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    ReferencePath::new(sys, ic)?.advance_to(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_well_rejects_bad_mass() {
        assert!(double_well(0.0).is_err());
        assert!(double_well(-1.0).is_err());
        assert!(double_well(f64::NAN).is_err());
        assert!(double_well(1.0).is_ok());
    }

    #[test]
    fn oscillator_rejects_bad_parameters() {
        assert!(damped_oscillator(1.0, 0.0, 0.1).is_err());
        assert!(damped_oscillator(0.0, 4.0, 0.1).is_err());
        assert!(damped_oscillator(1.0, 4.0, f64::INFINITY).is_err());
        assert!(damped_oscillator(1.0, 4.0, -0.5).is_ok(), "negative damping is allowed");
    }

    #[test]
    fn double_well_energy_at_study_start() {
        // E(q = 0.74, v = 0) = V(0.74) = (0.74^4 - 0.74^2) / 2 = -0.12386712.
        let sys = double_well(1.0).unwrap();
        let e = continuous_energy(&sys, 0.0, &[0.74], &[0.0]);
        assert!((e - (-0.12386712)).abs() < 1e-15, "E = {e}");
    }

    #[test]
    fn oscillator_energy_is_kinetic_plus_spring() {
        let sys = damped_oscillator(1.0, 4.0, 0.3).unwrap();
        let e = continuous_energy(&sys, 0.0, &[1.0], &[2.0]);
        assert!((e - 4.0).abs() < 1e-15, "E = {e}");
    }

    #[test]
    fn initial_condition_validation() {
        assert!(InitialCondition::scalar(0.0, 0.74, 0.0).is_ok());
        assert!(InitialCondition::scalar(f64::NAN, 0.74, 0.0).is_err());
        assert!(InitialCondition::scalar(0.0, f64::INFINITY, 0.0).is_err());
        assert!(InitialCondition::new(0.0, vec![1.0, 2.0], vec![0.0]).is_err());
        assert!(InitialCondition::new(0.0, vec![], vec![]).is_err());
    }

    #[test]
    fn undamped_oscillator_reference_is_cosine() {
        let sys = damped_oscillator(1.0, 4.0, 0.0).unwrap();
        let ic = InitialCondition::scalar(0.0, 1.0, 0.0).unwrap();
        let t = core::f64::consts::FRAC_PI_4; // quarter period of cos(2t)
        let (q, v) = reference_state(&sys, &ic, t).unwrap();
        assert!(q[0].abs() < 1e-12, "q = {}", q[0]);
        assert!((v[0] + 2.0).abs() < 1e-12, "v = {}", v[0]);
    }

    #[test]
    fn damped_oscillator_reference_satisfies_the_ode() {
        // Check m q'' + c q' + k q = 0 with centred differences, and that the
        // reported v matches q'.
        let (m, k, c) = (1.3, 5.0, 0.4);
        let sys = damped_oscillator(m, k, c).unwrap();
        let ic = InitialCondition::scalar(0.5, 0.8, -0.3).unwrap();
        let eps = 1e-5;
        for &t in &[0.5, 1.0, 2.7, 6.2] {
            let (qm, _) = reference_state(&sys, &ic, t - eps).unwrap();
            let (q0, v0) = reference_state(&sys, &ic, t).unwrap();
            let (qp, _) = reference_state(&sys, &ic, t + eps).unwrap();
            let qd = (qp[0] - qm[0]) / (2.0 * eps);
            let qdd = (qp[0] - 2.0 * q0[0] + qm[0]) / (eps * eps);
            assert!((qd - v0[0]).abs() < 1e-9, "t = {t}: q' = {qd} vs v = {}", v0[0]);
            let residual = m * qdd + c * qd + k * q0[0];
            assert!(residual.abs() < 1e-5, "t = {t}: ODE residual = {residual}");
        }
    }

    #[test]
    fn damped_oscillator_reference_matches_initial_data() {
        let sys = damped_oscillator(1.0, 4.0, 0.02).unwrap();
        let ic = InitialCondition::scalar(2.0, 0.6, -0.4).unwrap();
        let (q, v) = reference_state(&sys, &ic, 2.0).unwrap();
        assert_eq!(q[0], 0.6);
        assert!((v[0] + 0.4).abs() < 1e-15, "v = {}", v[0]);
    }

    #[test]
    fn critically_damped_regime_is_rejected() {
        // zeta = c / (2 sqrt(k m)); c = 4 gives zeta = 1 for k = 4, m = 1.
        let sys = damped_oscillator(1.0, 4.0, 4.0).unwrap();
        let ic = InitialCondition::scalar(0.0, 1.0, 0.0).unwrap();
        match ReferencePath::new(&sys, &ic) {
            Err(ModelError::UnsupportedRegime { zeta }) => {
                assert!((zeta - 1.0).abs() < 1e-15, "zeta = {zeta}")
            }
            other => panic!("expected UnsupportedRegime, got {:?}", other.map(|_| ())),
        }
        // Strong negative damping is equally outside the oscillatory regime.
        let sys = damped_oscillator(1.0, 4.0, -4.2).unwrap();
        assert!(matches!(
            ReferencePath::new(&sys, &ic),
            Err(ModelError::UnsupportedRegime { .. })
        ));
    }

    #[test]
    fn double_well_reference_conserves_energy() {
        let sys = double_well(1.0).unwrap();
        let ic = InitialCondition::scalar(0.0, 0.74, 0.0).unwrap();
        let e0 = continuous_energy(&sys, 0.0, &ic.q0, &ic.v0);
        let mut path = ReferencePath::new(&sys, &ic).unwrap();
        let mut worst = 0.0f64;
        for i in 1..=100 {
            let t = i as f64;
            let (q, v) = path.advance_to(t).unwrap();
            let drift = (continuous_energy(&sys, t, &q, &v) - e0).abs();
            worst = worst.max(drift);
            assert!(q[0] > 0.6 && q[0] < 0.8, "t = {t}: q = {} left the well", q[0]);
        }
        assert!(worst < 1e-10, "max energy drift {worst}");
    }

    #[test]
    fn double_well_reference_matches_short_time_expansion() {
        // From rest, q(h) = q0 + a0 h^2 / 2 + O(h^4) with a0 = q0 - 2 q0^3.
        let sys = double_well(1.0).unwrap();
        let ic = InitialCondition::scalar(0.0, 0.74, 0.0).unwrap();
        let h = 1e-3;
        let (q, _) = reference_state(&sys, &ic, h).unwrap();
        let a0 = 0.74 - 2.0 * 0.74f64.powi(3);
        let expected = 0.74 + 0.5 * a0 * h * h;
        assert!((q[0] - expected).abs() < 1e-12, "q = {} vs {}", q[0], expected);
    }

    #[test]
    fn runge_kutta_path_rejects_backward_queries() {
        let sys = double_well(1.0).unwrap();
        let ic = InitialCondition::scalar(0.0, 0.74, 0.0).unwrap();
        let mut path = ReferencePath::new(&sys, &ic).unwrap();
        path.advance_to(1.0).unwrap();
        assert!(matches!(
            path.advance_to(0.5),
            Err(ModelError::BackwardQuery { .. })
        ));
        // Re-querying the current time is fine.
        assert!(path.advance_to(1.0).is_ok());
    }

    #[test]
    fn custom_system_has_no_reference() {
        let sys = SystemSpec::new(
            1,
            Box::new(|_, q, v| 0.5 * v[0] * v[0] - q[0]),
            Box::new(|_, _, _| 0.0),
            Box::new(|_, _, _, out: &mut [f64]| out[0] = -1.0),
            Box::new(|_, _, v, out: &mut [f64]| out[0] = v[0]),
        );
        let ic = InitialCondition::scalar(0.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            ReferencePath::new(&sys, &ic),
            Err(ModelError::NoReference)
        ));
    }

    #[test]
    fn conservative_system_reports_missing_force() {
        let sys = double_well(1.0).unwrap();
        let mut out = [0.0];
        assert_eq!(
            sys.force(0.0, &[0.74], &[0.0], &mut out),
            Err(ModelError::NoForce)
        );
    }
}
