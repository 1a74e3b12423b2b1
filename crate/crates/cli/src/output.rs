//! CSV and metadata-sidecar rendering.
//!
//! Column order and names are a public contract; numbers are printed in the
//! shortest decimal form that round-trips to the same `f64`, so identical
//! configurations produce byte-identical files.  Aborted runs keep their
//! partial table and end with a single `# aborted: ...` marker line.

use semvi_core::diagnostics::{energy_report, ConditionSample};
use semvi_core::integrators::{
    FallbackPolicy, Horizon, IntegratorConfig, SolverKind, StepMode, TrajectoryLog,
};
use semvi_core::model::SystemSpec;
use serde_json::{json, Value};

pub const RUN_HEADER: &str = "k,t,h,q,p,E_discrete,E_continuous,discrete_energy_error,\
                              discretization_error,newton_iters,residual_norm,condition,\
                              fallback_used";
pub const COMPARE_HEADER: &str = "k,t_fixed,h_fixed,discrete_energy_error_fixed,\
                                  discretization_error_fixed,t_adaptive,h_adaptive,\
                                  discrete_energy_error_adaptive,discretization_error_adaptive";
pub const SWEEP_HEADER: &str = "h0,max_condition,max_discrete_energy_error,status";

/// Shortest round-trip decimal form; `NaN` for not-a-number.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// A rendered CSV body plus its data-row count (header and marker excluded).
pub struct Table {
    pub text: String,
    pub rows: usize,
}

/// Appends the abort marker line for a failed run.
pub fn mark_aborted(table: &mut Table, reason: &str) {
    table.text.push_str(&format!("# aborted: {reason}\n"));
}

/// One row per state from the first stepped interval on: `k = 1` is the
/// bootstrap seed, `k >= 2` are solver steps.  The raw initial state is kept
/// in the log but has no step attached, so it is not printed.
pub fn render_run(sys: &SystemSpec, log: &TrajectoryLog) -> Result<Table, String> {
    let series = energy_report(sys, log)
        .map_err(|e| format!("reference evaluation failed while rendering: {e}"))?;
    let mut text = String::from(RUN_HEADER);
    text.push('\n');
    let mut rows = 0;
    for (k, rec) in log.records.iter().enumerate().skip(1) {
        let line = [
            k.to_string(),
            fmt_f64(rec.state.t),
            fmt_f64(rec.h),
            fmt_f64(rec.state.q[0]),
            fmt_f64(rec.state.p[0]),
            fmt_f64(series.e_discrete[k]),
            fmt_f64(series.e_continuous[k]),
            fmt_f64(series.discrete_energy_error[k]),
            fmt_f64(series.discretization_error[k]),
            rec.report.iterations.to_string(),
            fmt_f64(rec.report.residual_norm),
            fmt_f64(rec.report.condition_estimate),
            rec.report.fallback_used.to_string(),
        ]
        .join(",");
        text.push_str(&line);
        text.push('\n');
        rows += 1;
    }
    Ok(Table { text, rows })
}

/// Side-by-side error columns for a fixed and an adaptive run of the same
/// experiment.  The grids differ, so each half keeps its own time column;
/// the shorter run's cells are left empty once it is exhausted.
pub fn render_compare(
    sys: &SystemSpec,
    fixed: &TrajectoryLog,
    adaptive: &TrajectoryLog,
) -> Result<Table, String> {
    let f_series = energy_report(sys, fixed)
        .map_err(|e| format!("reference evaluation failed while rendering: {e}"))?;
    let a_series = energy_report(sys, adaptive)
        .map_err(|e| format!("reference evaluation failed while rendering: {e}"))?;
    let mut text = String::from(COMPARE_HEADER);
    text.push('\n');
    let mut rows = 0;
    let last = fixed.len().max(adaptive.len());
    for k in 1..last {
        let mut cells = vec![k.to_string()];
        if k < fixed.len() {
            cells.push(fmt_f64(f_series.t[k]));
            cells.push(fmt_f64(fixed.records[k].h));
            cells.push(fmt_f64(f_series.discrete_energy_error[k]));
            cells.push(fmt_f64(f_series.discretization_error[k]));
        } else {
            cells.extend(std::iter::repeat_n(String::new(), 4));
        }
        if k < adaptive.len() {
            cells.push(fmt_f64(a_series.t[k]));
            cells.push(fmt_f64(adaptive.records[k].h));
            cells.push(fmt_f64(a_series.discrete_energy_error[k]));
            cells.push(fmt_f64(a_series.discretization_error[k]));
        } else {
            cells.extend(std::iter::repeat_n(String::new(), 4));
        }
        text.push_str(&cells.join(","));
        text.push('\n');
        rows += 1;
    }
    Ok(Table { text, rows })
}

/// One row per swept base step, in input order.
pub fn render_sweep(samples: &[ConditionSample]) -> Table {
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for sample in samples {
        text.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(sample.h0),
            fmt_f64(sample.max_condition),
            fmt_f64(sample.max_discrete_energy_error),
            sample.status.label()
        ));
    }
    Table { text, rows: samples.len() }
}

/// The resolved library configuration as JSON, for the sidecar.
pub fn config_json(config: &IntegratorConfig) -> Value {
    let horizon = match config.horizon {
        Horizon::EndTime(t) => json!({ "end_time": t }),
        Horizon::MaxSteps(n) => json!({ "max_steps": n }),
    };
    json!({
        "mode": match config.mode { StepMode::Fixed => "fixed", StepMode::Adaptive => "adaptive" },
        "forced": config.forced,
        "h0": config.h0,
        "horizon": horizon,
        "newton_tol": config.newton_tol,
        "newton_max_iter": config.newton_max_iter,
        "h_min_factor": config.h_min_factor,
        "h_max_factor": config.h_max_factor,
        "fallback": match config.fallback {
            FallbackPolicy::FixedSubstep => "fixed-substep",
            FallbackPolicy::None => "none",
        },
        "solver": match config.solver {
            SolverKind::RootFind => "root-find",
            SolverKind::LeastSquares => "least-squares",
        },
    })
}

/// Sidecar contents: the config as given, the resolved settings, the
/// reference-oracle settings, and the outcome.  Deliberately no timestamps
/// or host details — the sidecar must be as reproducible as the CSV.
pub fn sidecar(
    command: &str,
    config: &crate::config::ExperimentConfig,
    resolved: Value,
    oracle: Value,
    csv_path: &str,
    rows: usize,
    status: &str,
) -> String {
    let doc = json!({
        "command": command,
        "config": serde_json::to_value(config).expect("config serializes"),
        "resolved": resolved,
        "oracle": oracle,
        "csv": { "path": csv_path, "rows": rows, "status": status },
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("sidecar serializes");
    text.push('\n');
    text
}

/// Oracle settings as recorded in a run's metadata.
pub fn oracle_json(method: &str, max_substep: Option<f64>) -> Value {
    json!({ "reference_method": method, "reference_max_substep": max_substep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use semvi_core::integrators::run;
    use semvi_core::model::{double_well, InitialCondition};

    #[test]
    fn floats_print_shortest_round_trip() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_f64(1e-14), "0.00000000000001");
        let tricky = 0.1 + 0.2;
        assert_eq!(fmt_f64(tricky).parse::<f64>().unwrap(), tricky);
    }

    #[test]
    fn ten_fixed_steps_make_twelve_lines() {
        let sys = double_well(1.0).unwrap();
        let ic = InitialCondition::scalar(0.0, 0.74, 0.0).unwrap();
        let config = IntegratorConfig::fixed(0.01, Horizon::MaxSteps(10));
        let log = run(&sys, &ic, &config).unwrap();
        let table = render_run(&sys, &log).unwrap();
        assert_eq!(table.rows, 11, "bootstrap row plus ten steps");
        assert_eq!(table.text.lines().count(), 12, "header plus bootstrap plus ten steps");
        assert!(table.text.starts_with("k,t,h,q,p,E_discrete,"));
        let bootstrap = table.text.lines().nth(1).unwrap();
        let cells: Vec<&str> = bootstrap.split(',').collect();
        assert_eq!(cells.len(), 13);
        assert_eq!(cells[0], "1");
        assert_eq!(cells[11], "NaN", "the seed row has no solve behind it");
        assert_eq!(cells[12], "false");
    }

    #[test]
    fn abort_marker_is_a_single_comment_line() {
        let mut table = Table { text: String::from("h\n1\n"), rows: 1 };
        mark_aborted(&mut table, "step 3 guard violation: h=2 outside [0.001, 1]");
        assert!(table.text.ends_with("# aborted: step 3 guard violation: h=2 outside [0.001, 1]\n"));
    }

    #[test]
    fn sweep_rows_follow_input_order() {
        use semvi_core::diagnostics::SweepStatus;
        let samples = vec![
            ConditionSample {
                h0: 0.1,
                max_condition: 12.5,
                max_discrete_energy_error: 1e-13,
                status: SweepStatus::Ok,
            },
            ConditionSample {
                h0: 0.01,
                max_condition: f64::NAN,
                max_discrete_energy_error: f64::NAN,
                status: SweepStatus::SolverFailure,
            },
        ];
        let table = render_sweep(&samples);
        let lines: Vec<&str> = table.text.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines[1], "0.1,12.5,0.0000000000001,ok");
        assert_eq!(lines[2], "0.01,NaN,NaN,solver-failure");
    }
}
