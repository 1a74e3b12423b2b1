//! Experiment runner for the semvi integrator library.
//!
//! Three subcommands read a JSON experiment file and write CSV plus a
//! `.meta.json` sidecar: `run` executes one configured integrator, `compare`
//! runs the fixed and adaptive integrators off the same section, and
//! `sweep-h0` reruns the adaptive integrator across a base-step list.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration error,
//! 3 solver failure, 4 guard abort.  On 3 and 4 the partial CSV is kept,
//! ending in a `# aborted: ...` marker line.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use semvi_core::diagnostics::condition_study;
use semvi_core::integrators::{run, RunError, StepMode, TrajectoryLog};
use semvi_core::model::{InitialCondition, ReferencePath, SystemSpec};

use config::ExperimentConfig;
use output::{mark_aborted, Table};

#[derive(Parser)]
#[command(
    name = "semvi",
    version,
    about = "Deterministic experiment runner for structure-preserving integrators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Write the CSV here instead of the config file's `output` path.
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Suppress the completion summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured integrator and write its trajectory table.
    Run { config: PathBuf },
    /// Run fixed and adaptive integrators on the same experiment, side by side.
    Compare { config: PathBuf },
    /// Rerun the adaptive integrator across `sweep.h0_list`.
    #[command(name = "sweep-h0")]
    SweepH0 { config: PathBuf },
}

/// Failure classes mapped onto process exit codes.
enum Failure {
    Io(String),
    Config(String),
    Solver(String),
    Guard(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Guard(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Solver(m) | Failure::Guard(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, path) = match &cli.command {
        Command::Run { config } => ("run", config),
        Command::Compare { config } => ("compare", config),
        Command::SweepH0 { config } => ("sweep-h0", config),
    };
    match dispatch(command, path, &cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("semvi {command}: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn dispatch(command: &str, path: &Path, cli: &Cli) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
    let config = ExperimentConfig::from_json(&text).map_err(Failure::Config)?;
    let csv_path = cli
        .output
        .as_ref()
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|| config.output.clone());
    let sys = config.system.build().map_err(Failure::Config)?;
    let ic = config.ic().map_err(Failure::Config)?;
    match command {
        "run" => cmd_run(&config, &sys, &ic, &csv_path, cli.quiet),
        "compare" => cmd_compare(&config, &sys, &ic, &csv_path, cli.quiet),
        "sweep-h0" => cmd_sweep_h0(&config, &sys, &ic, &csv_path, cli.quiet),
        _ => unreachable!("clap restricts the command set"),
    }
}

/// Writes the CSV and its pre-rendered sidecar; the table may already carry
/// an abort marker.
fn write_artifacts(
    table: &Table,
    sidecar: &str,
    csv_path: &str,
    status: &str,
    quiet: bool,
) -> Result<(), Failure> {
    std::fs::write(csv_path, &table.text)
        .map_err(|e| Failure::Io(format!("cannot write {csv_path}: {e}")))?;
    let meta_path = format!("{csv_path}.meta.json");
    std::fs::write(&meta_path, sidecar)
        .map_err(|e| Failure::Io(format!("cannot write {meta_path}: {e}")))?;
    if !quiet {
        println!("{csv_path}: {} data rows ({status}); sidecar {meta_path}", table.rows);
    }
    Ok(())
}

/// Renders a finished or partial log, marking the table when the run died.
/// Returns the table, the sidecar status, and the failure to surface (if any).
fn settle_run(
    sys: &SystemSpec,
    outcome: Result<TrajectoryLog, RunError>,
) -> Result<(Table, &'static str, Option<Failure>), Failure> {
    match outcome {
        Ok(log) => {
            let table = output::render_run(sys, &log).map_err(Failure::Io)?;
            Ok((table, "completed", None))
        }
        Err(RunError::Solver { log, error, step }) => {
            let mut table = output::render_run(sys, &log).map_err(Failure::Io)?;
            let reason = format!("step {step} solve failure: {error}");
            mark_aborted(&mut table, &reason);
            Ok((table, "aborted-solver-failure", Some(Failure::Solver(reason))))
        }
        Err(RunError::GuardViolation { log, h, h_min, h_max, step }) => {
            let mut table = output::render_run(sys, &log).map_err(Failure::Io)?;
            let reason = format!(
                "step {step} guard violation: h={} outside [{}, {}]",
                output::fmt_f64(h),
                output::fmt_f64(h_min),
                output::fmt_f64(h_max)
            );
            mark_aborted(&mut table, &reason);
            Ok((table, "aborted-guard-violation", Some(Failure::Guard(reason))))
        }
        Err(e @ (RunError::Config(_) | RunError::Model(_))) => {
            Err(Failure::Config(e.to_string()))
        }
    }
}

fn cmd_run(
    config: &ExperimentConfig,
    sys: &SystemSpec,
    ic: &InitialCondition,
    csv_path: &str,
    quiet: bool,
) -> Result<(), Failure> {
    let integrator = config.integrator.to_config(sys, None).map_err(Failure::Config)?;
    let resolved = output::config_json(&integrator);
    let (table, status, failure) = settle_run(sys, run(sys, ic, &integrator))?;
    let oracle = oracle_for(sys, ic)?;
    let meta = output::sidecar("run", config, resolved, oracle, csv_path, table.rows, status);
    write_artifacts(&table, &meta, csv_path, status, quiet)?;
    match failure {
        Some(failure) => Err(failure),
        None => Ok(()),
    }
}

fn cmd_compare(
    config: &ExperimentConfig,
    sys: &SystemSpec,
    ic: &InitialCondition,
    csv_path: &str,
    quiet: bool,
) -> Result<(), Failure> {
    let fixed_config =
        config.integrator.to_config(sys, Some(StepMode::Fixed)).map_err(Failure::Config)?;
    let adaptive_config =
        config.integrator.to_config(sys, Some(StepMode::Adaptive)).map_err(Failure::Config)?;
    let resolved = json!({
        "fixed": output::config_json(&fixed_config),
        "adaptive": output::config_json(&adaptive_config),
    });
    let oracle = oracle_for(sys, ic)?;

    // Either leg dying keeps the finished parts: the table holds whatever
    // rendered, with the marker naming the leg that failed.
    let (fixed_log, fixed_failure) = settle_leg(sys, ic, &fixed_config)?;
    let fixed_failure = fixed_failure.map(|f| ("fixed", f));
    let (adaptive_log, adaptive_failure) = settle_leg(sys, ic, &adaptive_config)?;
    let adaptive_failure = adaptive_failure.map(|f| ("adaptive", f));
    let mut table =
        output::render_compare(sys, &fixed_log, &adaptive_log).map_err(Failure::Io)?;
    let mut status = "completed";
    let mut surfaced = None;
    for (leg, failure) in [fixed_failure, adaptive_failure].into_iter().flatten() {
        let reason = format!("{leg} integrator: {}", failure.message());
        mark_aborted(&mut table, &reason);
        if surfaced.is_none() {
            status = match failure {
                Failure::Guard(_) => "aborted-guard-violation",
                _ => "aborted-solver-failure",
            };
            surfaced = Some(failure);
        }
    }
    let meta = output::sidecar("compare", config, resolved, oracle, csv_path, table.rows, status);
    write_artifacts(&table, &meta, csv_path, status, quiet)?;
    match surfaced {
        Some(failure) => Err(failure),
        None => Ok(()),
    }
}

/// Runs one compare leg, folding solver and guard failures into a partial
/// log plus a pending failure instead of an early return.
fn settle_leg(
    sys: &SystemSpec,
    ic: &InitialCondition,
    integrator: &semvi_core::integrators::IntegratorConfig,
) -> Result<(TrajectoryLog, Option<Failure>), Failure> {
    match run(sys, ic, integrator) {
        Ok(log) => Ok((log, None)),
        Err(RunError::Solver { log, error, step }) => {
            let reason = format!("step {step} solve failure: {error}");
            Ok((*log, Some(Failure::Solver(reason))))
        }
        Err(RunError::GuardViolation { log, h, h_min, h_max, step }) => {
            let reason = format!(
                "step {step} guard violation: h={} outside [{}, {}]",
                output::fmt_f64(h),
                output::fmt_f64(h_min),
                output::fmt_f64(h_max)
            );
            Ok((*log, Some(Failure::Guard(reason))))
        }
        Err(e @ (RunError::Config(_) | RunError::Model(_))) => {
            Err(Failure::Config(e.to_string()))
        }
    }
}

fn cmd_sweep_h0(
    config: &ExperimentConfig,
    sys: &SystemSpec,
    ic: &InitialCondition,
    csv_path: &str,
    quiet: bool,
) -> Result<(), Failure> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::Config("sweep-h0 needs a `sweep` section with `h0_list`".into()))?;
    if config.integrator.mode().map_err(Failure::Config)? != StepMode::Adaptive {
        return Err(Failure::Config(
            "sweep-h0 studies the adaptive integrator; set integrator.mode = \"adaptive\"".into(),
        ));
    }
    let base = config.integrator.to_config(sys, None).map_err(Failure::Config)?;
    let samples = condition_study(sys, ic, &base, &sweep.h0_list);
    let table = output::render_sweep(&samples);
    let resolved = json!({
        "base": output::config_json(&base),
        "h0_list": sweep.h0_list,
    });
    let oracle = oracle_for(sys, ic)?;
    // Per-h0 failures are data (status column), not process failures.
    let meta =
        output::sidecar("sweep-h0", config, resolved, oracle, csv_path, table.rows, "completed");
    write_artifacts(&table, &meta, csv_path, "completed", quiet)
}

/// The reference-oracle settings every run bootstraps from.
fn oracle_for(sys: &SystemSpec, ic: &InitialCondition) -> Result<serde_json::Value, Failure> {
    let path = ReferencePath::new(sys, ic)
        .map_err(|e| Failure::Config(format!("reference oracle rejected the setup: {e}")))?;
    Ok(output::oracle_json(path.method(), path.max_substep()))
}
