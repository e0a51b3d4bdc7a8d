//! Machine-readable artifacts of an experiment: `trajectories.csv`,
//! `summary.toml` and `config.toml`.
//!
//! Trajectory rows are written in run order, then trial order, then step
//! order, with every number in `{:.16e}` (17 significant digits), so equal
//! results give byte-identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::closed_loop::GameOutcome;
use crate::error::Result;
use crate::experiment::{ExperimentReport, RunResult};
use crate::sde::ControlledTrajectory;

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CONFIG_FILE: &str = "config.toml";

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub trajectories: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
}

/// CSV header for a state of dimension `n` and controls of dimensions `m`, `l`.
pub fn csv_header(n: usize, m: usize, l: usize) -> String {
    let mut cols = vec!["run".to_string(), "trial_id".into(), "step".into(), "t".into()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend((0..m).map(|i| format!("u{i}")));
    cols.extend((0..l).map(|i| format!("v{i}")));
    cols.push("exit".into());
    cols.join(",")
}

/// Rows of one path. The last row carries the exit label and no controls;
/// earlier rows carry the controls applied over the following step.
pub fn write_trajectory(w: &mut impl Write, run: usize, trial: u64, traj: &ControlledTrajectory) -> Result<()> {
    let path = &traj.path;
    let last = path.states.len() - 1;
    let m = traj.controls_u.first().map_or(0, |c| c.len());
    let l = traj.controls_v.first().map_or(0, |c| c.len());
    for (k, (x, t)) in path.states.iter().zip(&path.times).enumerate() {
        write!(w, "{run},{trial},{k},{t:.16e}")?;
        for c in x.as_slice() {
            write!(w, ",{c:.16e}")?;
        }
        if k < last {
            for c in traj.controls_u[k].iter().chain(traj.controls_v[k].iter()) {
                write!(w, ",{c:.16e}")?;
            }
            writeln!(w, ",none")?;
        } else {
            for _ in 0..m + l {
                write!(w, ",")?;
            }
            writeln!(w, ",{}", path.exit_kind.label())?;
        }
    }
    Ok(())
}

/// Write all recorded paths of `report` as CSV.
pub fn write_trajectories(w: &mut impl Write, report: &ExperimentReport) -> Result<()> {
    let (n, m, l) = report.dims;
    writeln!(w, "{}", csv_header(n, m, l))?;
    for (r, run) in report.runs.iter().enumerate() {
        for (trial, traj) in &run.outcome.recorded {
            write_trajectory(w, r, *trial, traj)?;
        }
    }
    Ok(())
}

fn float_array(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|v| Value::Float(*v)).collect())
}

fn outcome_table(o: &GameOutcome) -> Table {
    let mut t = Table::new();
    t.insert("trials".into(), Value::Integer(o.trials as i64));
    t.insert("failures".into(), Value::Integer(o.failures as i64));
    t.insert("p_fail".into(), Value::Float(o.p_fail));
    t.insert("p_fail_ci".into(), float_array(&[o.ci.0, o.ci.1]));
    t.insert("cost_mean".into(), Value::Float(o.cost_mean));
    t.insert("cost_std".into(), Value::Float(o.cost_std));
    t.insert("cost_se".into(), Value::Float(o.cost_se));
    t.insert("performance_mean".into(), Value::Float(o.performance_mean));
    t.insert("performance_se".into(), Value::Float(o.performance_se));
    t.insert("agent_energy".into(), Value::Float(o.control_energy_u));
    t.insert("adversary_energy".into(), Value::Float(o.control_energy_v));
    t.insert("adversary_energy_raw".into(), Value::Float(o.adversary_energy_raw));
    t.insert("decisions".into(), Value::Integer(o.decisions as i64));
    t.insert("low_ess_decisions".into(), Value::Integer(o.low_ess_decisions as i64));
    t.insert("truncation_hits".into(), Value::Integer(o.truncation_hits as i64));
    t
}

fn run_table(index: usize, run: &RunResult) -> Table {
    let mut t = outcome_table(&run.outcome);
    t.insert("run".into(), Value::Integer(index as i64));
    t.insert("label".into(), Value::String(run.label.clone()));
    if let Some((name, value)) = &run.parameter {
        t.insert(name.clone(), Value::Float(*value));
    }
    t.insert("lambda".into(), Value::Float(run.lambda));
    t.insert("rollouts".into(), Value::Integer(run.rollouts as i64));
    t.insert("seconds".into(), Value::Float(run.seconds));
    t
}

/// Structured summary: λ certificate, numerics, per-run statistics, check
/// tables and verdicts.
pub fn summary_table(report: &ExperimentReport) -> Table {
    let mut root = Table::new();
    root.insert("experiment".into(), Value::String(report.kind.name().into()));
    root.insert("game".into(), Value::String(report.game.clone()));
    root.insert("mode".into(), Value::String(format!("{:?}", report.config.mode).to_lowercase()));
    root.insert("seconds".into(), Value::Float(report.seconds));
    root.insert("rollouts".into(), Value::Integer(report.rollouts as i64));

    let mut lam = Table::new();
    lam.insert("value".into(), Value::Float(report.lambda.lambda));
    lam.insert("residual".into(), Value::Float(report.lambda.residual));
    lam.insert("probes".into(), Value::Integer(report.lambda.probe_count as i64));
    lam.insert("source".into(), Value::String(format!("{:?}", report.lambda.source)));
    lam.insert("exact".into(), Value::Boolean(report.lambda.exact));
    if let Some(single) = report.single_agent_lambda {
        lam.insert("single_agent".into(), Value::Float(single));
    }
    root.insert("lambda".into(), Value::Table(lam));

    let n = &report.numerics;
    let mut num = Table::new();
    num.insert("h".into(), Value::Float(n.h));
    num.insert("rollouts".into(), Value::Integer(n.rollouts as i64));
    num.insert("decision_steps".into(), Value::Integer(n.decision_steps as i64));
    num.insert("trials".into(), Value::Integer(n.trials as i64));
    num.insert(
        "master_seed".into(),
        i64::try_from(n.master_seed).map_or_else(|_| Value::String(n.master_seed.to_string()), Value::Integer),
    );
    num.insert("reproducible".into(), Value::Boolean(n.reproducible));
    num.insert("workers".into(), Value::Integer(n.workers as i64));
    root.insert("numerics".into(), Value::Table(num));

    let runs: Vec<Value> = report
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| Value::Table(run_table(i, r)))
        .collect();
    root.insert("runs".into(), Value::Array(runs));

    if !report.xcheck.is_empty() {
        let rows = report
            .xcheck
            .iter()
            .map(|r| {
                let mut t = Table::new();
                t.insert("state".into(), float_array(&r.state));
                t.insert("xi_pi".into(), Value::Float(r.xi_pi));
                t.insert("xi_oracle".into(), Value::Float(r.xi_oracle));
                t.insert("xi_rel_err".into(), Value::Float(r.xi_rel_err));
                t.insert("u_pi".into(), float_array(&r.u_pi));
                t.insert("u_oracle".into(), float_array(&r.u_oracle));
                t.insert("v_pi".into(), float_array(&r.v_pi));
                t.insert("u_rel_err".into(), Value::Float(r.u_rel_err));
                t.insert("u_max_z".into(), Value::Float(r.u_max_z));
                t.insert("oracle_control_norm".into(), Value::Float(r.oracle_control_norm));
                t.insert("ess".into(), Value::Float(r.ess));
                t.insert("control_compared".into(), Value::Boolean(r.control_compared));
                Value::Table(t)
            })
            .collect();
        root.insert("xcheck".into(), Value::Array(rows));
    }

    if let Some(t3) = &report.theorem3 {
        let mut t = Table::new();
        t.insert("gamma_sq".into(), Value::Float(t3.gamma_sq));
        t.insert("delta_gamma".into(), Value::Float(t3.delta_gamma));
        t.insert("saddle_performance".into(), Value::Float(t3.saddle_performance));
        t.insert("saddle".into(), Value::Table(outcome_table(&t3.saddle)));
        let rows = t3
            .rows
            .iter()
            .map(|r| {
                let mut row = Table::new();
                row.insert("adversary".into(), Value::String(r.label.clone()));
                row.insert("delta".into(), Value::Float(r.delta));
                row.insert("measured_energy".into(), Value::Float(r.measured_energy));
                row.insert("lhs".into(), Value::Float(r.lhs));
                row.insert("rhs".into(), Value::Float(r.rhs));
                row.insert("gap".into(), Value::Float(r.gap));
                row.insert("combined_se".into(), Value::Float(r.combined_se));
                row.insert("paired_se".into(), Value::Float(r.paired_se));
                row.insert("p_fail".into(), Value::Float(r.p_fail));
                row.insert("holds".into(), Value::Boolean(r.holds));
                Value::Table(row)
            })
            .collect();
        t.insert("rows".into(), Value::Array(rows));
        root.insert("theorem3".into(), Value::Table(t));
    }

    if let Some(s) = &report.saddle {
        let mut t = Table::new();
        t.insert("value".into(), Value::Float(s.value));
        t.insert("value_se".into(), Value::Float(s.value_se));
        let rows = s
            .rows
            .iter()
            .map(|r| {
                let mut row = Table::new();
                row.insert("side".into(), Value::String(format!("{:?}", r.side).to_lowercase()));
                row.insert("perturbation".into(), Value::String(r.perturbation.describe()));
                row.insert("cost".into(), Value::Float(r.cost));
                row.insert("cost_se".into(), Value::Float(r.cost_se));
                row.insert("margin".into(), Value::Float(r.margin));
                row.insert("combined_se".into(), Value::Float(r.combined_se));
                row.insert("paired_se".into(), Value::Float(r.paired_se));
                row.insert("holds".into(), Value::Boolean(r.holds));
                Value::Table(row)
            })
            .collect();
        t.insert("rows".into(), Value::Array(rows));
        root.insert("saddle".into(), Value::Table(t));
    }

    let verdicts = report
        .verdicts
        .iter()
        .map(|v| {
            let mut t = Table::new();
            t.insert("name".into(), Value::String(v.name.clone()));
            t.insert("passed".into(), Value::Boolean(v.passed));
            t.insert("detail".into(), Value::String(v.detail.clone()));
            Value::Table(t)
        })
        .collect();
    root.insert("verdicts".into(), Value::Array(verdicts));
    root
}

/// Write trajectories, summary and config echo into `dir`, creating it.
pub fn emit_outputs(report: &ExperimentReport, dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir)?;
    let files = OutputFiles {
        trajectories: dir.join(TRAJECTORIES_FILE),
        summary: dir.join(SUMMARY_FILE),
        config: dir.join(CONFIG_FILE),
    };
    let mut csv = BufWriter::new(fs::File::create(&files.trajectories)?);
    write_trajectories(&mut csv, report)?;
    csv.flush()?;
    fs::write(&files.summary, toml::to_string(&summary_table(report))?)?;
    fs::write(&files.config, report.config.emit()?)?;
    Ok(files)
}
