//! CSV and JSON artifacts. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{GameSpec, Trajectory};
use crate::harness::{SweepResult, VelocityLevel};
use crate::learner::LearningTrace;
use crate::solver::IterationLog;

pub const TRAJECTORY_COLUMNS: [&str; 12] = [
    "t_index", "time_s", "robot", "x", "y", "z", "vx", "vy", "vz", "ux", "uy", "uz",
];

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {}", e.error())))
}

fn fmt(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Maps a state row to `(x, y, z, vx, vy, vz)` for planar or full states.
fn state_columns(state_dim: usize) -> Result<[Option<usize>; 6]> {
    match state_dim {
        4 => Ok([Some(0), Some(1), None, Some(2), Some(3), None]),
        6 => Ok([Some(0), Some(1), Some(2), Some(3), Some(4), Some(5)]),
        other => Err(Error::Dimension {
            what: "state width for trajectory CSV (4 or 6)",
            expected: 6,
            got: other,
        }),
    }
}

/// Trajectory CSV: one row per robot and step; control columns are empty
/// on the final step.
pub fn trajectory_csv(traj: &Trajectory, dt: f64) -> Result<Vec<u8>> {
    let cols = state_columns(traj.state_dim())?;
    let c = traj.control_dim();
    let header: Vec<String> = TRAJECTORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for t in 0..traj.horizon() {
        for i in 0..traj.num_robots() {
            let x = traj.state(t, i);
            let mut row = vec![t.to_string(), fmt(t as f64 * dt), i.to_string()];
            for col in cols {
                row.push(fmt(col.map_or(0.0, |k| x[k])));
            }
            if t + 1 < traj.horizon() {
                let u = traj.control(t, i);
                for k in 0..3 {
                    row.push(fmt(if k < c { u[k] } else { 0.0 }));
                }
            } else {
                row.extend(std::iter::repeat(String::new()).take(3));
            }
            rows.push(row);
        }
    }
    csv_bytes(&header, rows)
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, dt: f64) -> Result<()> {
    write_atomic(path, &trajectory_csv(traj, dt)?)
}

/// Parses a trajectory CSV against `spec`'s shape.
pub fn parse_trajectory_csv(bytes: &[u8], spec: &GameSpec) -> Result<Trajectory> {
    let cols = state_columns(spec.state_dim())?;
    let (n, horizon) = (spec.num_robots(), spec.horizon());
    let (s, c) = (spec.state_dim(), spec.control_dim());
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != TRAJECTORY_COLUMNS {
        return Err(Error::Config(format!(
            "trajectory CSV header must be {}",
            TRAJECTORY_COLUMNS.join(",")
        )));
    }
    let mut states = DMatrix::from_element(horizon, n * s, f64::NAN);
    let mut controls = DMatrix::from_element(horizon - 1, n * c, f64::NAN);
    let mut seen = vec![false; horizon * n];
    let parse = |field: &str, what: &str, line: u64| -> Result<f64> {
        field
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("line {line}: bad {what} value {field:?}")))
    };
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let t: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("line {line}: bad t_index")))?;
        let i: usize = record[2]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("line {line}: bad robot index")))?;
        if t >= horizon || i >= n {
            return Err(Error::Config(format!(
                "line {line}: step {t} or robot {i} outside the {horizon}-step, {n}-robot game"
            )));
        }
        if std::mem::replace(&mut seen[t * n + i], true) {
            return Err(Error::Config(format!("line {line}: duplicate row for step {t} robot {i}")));
        }
        for (k, col) in cols.iter().enumerate() {
            if let Some(col) = col {
                states[(t, i * s + col)] = parse(&record[3 + k], TRAJECTORY_COLUMNS[3 + k], line)?;
            }
        }
        if t + 1 < horizon {
            for k in 0..c {
                controls[(t, i * c + k)] = parse(&record[9 + k], TRAJECTORY_COLUMNS[9 + k], line)?;
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Dimension {
            what: "trajectory CSV rows",
            expected: horizon * n,
            got: seen.iter().filter(|s| **s).count(),
        });
    }
    Trajectory::new(n, s, c, states, controls)
}

pub fn read_trajectory_csv(path: &Path, spec: &GameSpec) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory_csv(&bytes, spec)
}

pub fn write_learning_trace_csv(path: &Path, trace: &LearningTrace) -> Result<()> {
    let mut header = vec!["iteration".to_string()];
    header.extend(trace.param_labels.iter().cloned());
    header.extend(
        ["loss", "grad_norm", "solver_status", "solver_iterations", "retreats", "wall_time_s"]
            .iter()
            .map(|s| s.to_string()),
    );
    let rows = trace.records.iter().map(|r| {
        let mut row = vec![r.iteration.to_string()];
        row.extend(r.theta.iter().map(|&v| fmt(v)));
        row.push(fmt_opt(r.loss));
        row.push(fmt_opt(r.gradient_norm));
        row.push(r.solver_status.to_string());
        row.push(r.solver_iterations.to_string());
        row.push(r.retreats.to_string());
        row.push(fmt(r.wall_time_s));
        row
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

pub fn write_iteration_log_csv(path: &Path, history: &[IterationLog]) -> Result<()> {
    let header: Vec<String> = [
        "iteration",
        "control_weight",
        "residual",
        "merit",
        "step",
        "regularization",
        "steepest_descent",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = history.iter().map(|h| {
        vec![
            h.iteration.to_string(),
            fmt(h.control_weight),
            fmt(h.residual),
            fmt(h.merit),
            fmt(h.step),
            fmt(h.regularization),
            h.steepest_descent.to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Per-trial rows: level, sigma, trial, seed, learned entries, D, status,
/// learner iterations and wall time.
pub fn sweep_trials_csv(sweep: &SweepResult) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["level", "sigma", "trial", "seed"].iter().map(|s| s.to_string()).collect();
    header.extend(sweep.param_labels.iter().cloned());
    header.extend(
        ["reconstruction_error", "status", "learn_iterations", "wall_time_s"]
            .iter()
            .map(|s| s.to_string()),
    );
    let rows = sweep.trials.iter().map(|t| {
        let mut row = vec![t.level.to_string(), fmt(t.sigma), t.trial.to_string(), t.seed.to_string()];
        row.extend(t.theta_hat.iter().map(|&v| fmt(v)));
        row.push(fmt_opt(t.reconstruction_error));
        row.push(t.status.clone());
        row.push(t.learn_iterations.to_string());
        row.push(fmt(t.wall_time_s));
        row
    });
    csv_bytes(&header, rows)
}

/// Per-level rows with median and quartiles of D and of each learned entry.
pub fn sweep_aggregate_csv(sweep: &SweepResult) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["sigma", "trials", "failures", "D_median", "D_q25", "D_q75"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for label in &sweep.param_labels {
        for stat in ["median", "q25", "q75"] {
            header.push(format!("{label}_{stat}"));
        }
    }
    let rows = sweep.aggregates.iter().map(|a| {
        let mut row = vec![fmt(a.sigma), a.trials.to_string(), a.failures.to_string()];
        let push = |row: &mut Vec<String>, s: Option<crate::harness::Summary>| {
            row.push(fmt_opt(s.map(|s| s.median)));
            row.push(fmt_opt(s.map(|s| s.q25)));
            row.push(fmt_opt(s.map(|s| s.q75)));
        };
        push(&mut row, a.reconstruction_error);
        for s in &a.theta_hat {
            push(&mut row, *s);
        }
        row
    });
    csv_bytes(&header, rows)
}

pub fn velocity_csv(levels: &[VelocityLevel]) -> Result<Vec<u8>> {
    let header: Vec<String> = ["sigma_v", "trials", "successes", "success_rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = levels.iter().map(|l| {
        vec![
            fmt(l.sigma),
            l.trials.to_string(),
            l.successes.to_string(),
            fmt(l.success_rate),
        ]
    });
    csv_bytes(&header, rows)
}
