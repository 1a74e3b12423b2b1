//! Experiment configuration: the JSON schema and its conversion into the
//! library's system, initial-condition, and integrator types.
//!
//! The file has four flat sections — `system`, `ic`, `integrator`, `output` —
//! plus an optional `sweep` section consumed by the `sweep-h0` subcommand.
//! Unknown keys are rejected at every level, and every cross-field rule
//! (horizon exclusivity, per-system parameter sets, positivity) is checked
//! here so that a config that converts cleanly will also validate in the
//! library.

use serde::{Deserialize, Serialize};

use semvi_core::integrators::{FallbackPolicy, Horizon, IntegratorConfig, SolverKind, StepMode};
use semvi_core::model::{damped_oscillator, double_well, InitialCondition, SystemSpec};

/// A fully parsed experiment file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub ic: IcSection,
    pub integrator: IntegratorSection,
    /// Path the CSV is written to; the sidecar appends `.meta.json`.
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

/// Which system to integrate and its physical parameters.
///
/// `double-well` accepts `m` (default 1) and rejects `k`/`c`; `oscillator`
/// accepts `m` (default 1) and requires `k` and `c`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

/// Scalar initial condition; `t0` defaults to zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcSection {
    #[serde(default, skip_serializing_if = "is_zero")]
    pub t0: f64,
    pub q0: f64,
    pub v0: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

/// Step policy and solver settings.  Exactly one of `end_time` / `max_steps`
/// selects the horizon; the remaining fields fall back to library defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    /// `"fixed"` or `"adaptive"`.
    pub mode: String,
    pub h0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Defaults to whether the system carries a force term; setting it to
    /// the opposite is a configuration error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_min_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_max_factor: Option<f64>,
    /// `"fixed-substep"` (default) or `"none"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    /// `"root-find"` (default) or `"least-squares"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<String>,
}

/// Base-step list for the `sweep-h0` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub h0_list: Vec<f64>,
}

impl ExperimentConfig {
    /// Parses and cross-validates a config file's contents.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| format!("config schema violation: {e}"))?;
        config.system.build()?;
        config.ic()?;
        config.integrator.check_fields()?;
        if let Some(sweep) = &config.sweep {
            sweep.check()?;
        }
        Ok(config)
    }

    /// The initial condition described by the `ic` section.
    pub fn ic(&self) -> Result<InitialCondition, String> {
        InitialCondition::scalar(self.ic.t0, self.ic.q0, self.ic.v0)
            .map_err(|e| format!("invalid initial condition: {e}"))
    }
}

impl SystemSection {
    /// Instantiates the named system, rejecting parameters that do not
    /// belong to it.
    pub fn build(&self) -> Result<SystemSpec, String> {
        match self.name.as_str() {
            "double-well" => {
                if self.k.is_some() || self.c.is_some() {
                    return Err("system double-well takes only the parameter `m`".into());
                }
                double_well(self.m.unwrap_or(1.0))
                    .map_err(|e| format!("invalid double-well parameters: {e}"))
            }
            "oscillator" => {
                let k = self.k.ok_or("system oscillator requires the parameter `k`")?;
                let c = self.c.ok_or("system oscillator requires the parameter `c`")?;
                damped_oscillator(self.m.unwrap_or(1.0), k, c)
                    .map_err(|e| format!("invalid oscillator parameters: {e}"))
            }
            other => Err(format!(
                "unknown system `{other}`; expected `double-well` or `oscillator`"
            )),
        }
    }
}

impl IntegratorSection {
    /// Field-level checks that do not need the system: mode and enum
    /// spellings, horizon exclusivity.
    fn check_fields(&self) -> Result<(), String> {
        self.mode()?;
        self.horizon()?;
        self.fallback()?;
        self.solver()?;
        Ok(())
    }

    pub fn mode(&self) -> Result<StepMode, String> {
        match self.mode.as_str() {
            "fixed" => Ok(StepMode::Fixed),
            "adaptive" => Ok(StepMode::Adaptive),
            other => Err(format!("unknown mode `{other}`; expected `fixed` or `adaptive`")),
        }
    }

    fn horizon(&self) -> Result<Horizon, String> {
        match (self.end_time, self.max_steps) {
            (Some(t), None) => Ok(Horizon::EndTime(t)),
            (None, Some(n)) => Ok(Horizon::MaxSteps(n)),
            (None, None) => Err("integrator needs `end_time` or `max_steps`".into()),
            (Some(_), Some(_)) => {
                Err("integrator takes `end_time` or `max_steps`, not both".into())
            }
        }
    }

    fn fallback(&self) -> Result<FallbackPolicy, String> {
        match self.fallback.as_deref() {
            None | Some("fixed-substep") => Ok(FallbackPolicy::FixedSubstep),
            Some("none") => Ok(FallbackPolicy::None),
            Some(other) => Err(format!(
                "unknown fallback `{other}`; expected `fixed-substep` or `none`"
            )),
        }
    }

    fn solver(&self) -> Result<SolverKind, String> {
        match self.solver.as_deref() {
            None | Some("root-find") => Ok(SolverKind::RootFind),
            Some("least-squares") => Ok(SolverKind::LeastSquares),
            Some(other) => Err(format!(
                "unknown solver `{other}`; expected `root-find` or `least-squares`"
            )),
        }
    }

    /// The library configuration for this section, with `forced` defaulting
    /// to the system's own forcing flag and `mode` overridable (the compare
    /// subcommand runs both modes off one section).
    pub fn to_config(
        &self,
        sys: &SystemSpec,
        mode_override: Option<StepMode>,
    ) -> Result<IntegratorConfig, String> {
        let mode = match mode_override {
            Some(mode) => mode,
            None => self.mode()?,
        };
        let mut config = match mode {
            StepMode::Fixed => IntegratorConfig::fixed(self.h0, self.horizon()?),
            StepMode::Adaptive => IntegratorConfig::adaptive(self.h0, self.horizon()?),
        };
        config.forced = self.forced.unwrap_or_else(|| sys.has_force());
        if let Some(tol) = self.newton_tol {
            config.newton_tol = tol;
        }
        if let Some(cap) = self.newton_max_iter {
            config.newton_max_iter = cap;
        }
        if let Some(f) = self.h_min_factor {
            config.h_min_factor = f;
        }
        if let Some(f) = self.h_max_factor {
            config.h_max_factor = f;
        }
        config.fallback = self.fallback()?;
        config.solver = self.solver()?;
        config.validate(sys).map_err(|e| format!("invalid integrator settings: {e}"))?;
        Ok(config)
    }
}

impl SweepSection {
    fn check(&self) -> Result<(), String> {
        if self.h0_list.is_empty() {
            return Err("sweep.h0_list must not be empty".into());
        }
        for &h0 in &self.h0_list {
            if !(h0.is_finite() && h0 > 0.0) {
                return Err(format!("sweep.h0_list entries must be positive and finite, got {h0}"));
            }
        }
        Ok(())
    }
}
