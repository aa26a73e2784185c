use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use hypergame::dynamics::{continuous_hcw, hcw_matrices, planar_from_full};
use hypergame::game::{feasibility_report, PairParams, SpatialMode};
use hypergame::harness::{
    corrupt, multi_robot_generalization, noise_sweep, trend_slope, velocity_sensitivity_sweep,
    NoiseModel, SweepConfig,
};
use hypergame::io;
use hypergame::learner::learn_parameters;
use hypergame::scenario::{ScenarioConfig, SIX_ROBOT_JSON, TABLE_SCENARIO_JSON};
use hypergame::solver::solve_mcp;
use hypergame::Error;

/// Dynamic games with rotating-hyperplane collision avoidance for
/// spacecraft in relative orbital motion.
#[derive(Parser)]
#[command(name = "hypergame", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward game and write its trajectory and feasibility report.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Learn hyperplane parameters from an expert trajectory CSV.
    Learn {
        #[command(flatten)]
        common: Common,
        /// Expert trajectory in the trajectory CSV format.
        #[arg(long)]
        expert: PathBuf,
        /// Corrupt the expert with Gaussian noise of this standard deviation first.
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Run one of the experiment sweeps.
    Experiment {
        kind: ExperimentKind,
        #[command(flatten)]
        common: Common,
        /// Trials per level.
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated noise levels (m, or m/s for the velocity sweep).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        threads: Option<usize>,
        /// Twenty levels from 0 to 20 with twenty trials each.
        #[arg(long)]
        full_paper_scale: bool,
    },
    /// Dump the continuous and discrete dynamics matrices as JSON.
    ExportContinuous {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; the bundled two-robot scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (a file for export-continuous).
    #[arg(long)]
    output: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ExperimentKind {
    NoiseSweep,
    VelocitySweep,
    MultiRobot,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::SolverFailure(_) | Error::InfeasibleGeometry { .. } | Error::NonFinite(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

struct Loaded {
    config: ScenarioConfig,
    text: String,
    source: String,
}

fn load(common: &Common, fallback: &'static str) -> Result<Loaded, Failure> {
    let (text, source) = match &common.config {
        Some(path) => (
            std::fs::read_to_string(path)
                .map_err(|e| fail(1, format!("{}: {e}", path.display())))?,
            path.display().to_string(),
        ),
        None => (fallback.to_string(), "bundled".to_string()),
    };
    let mut config = ScenarioConfig::from_json(&text).map_err(|e| fail(1, format!("{source}: {e}")))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(Loaded { config, text, source })
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_source: &'a str,
    config_sha256: String,
    seed: u64,
    hypergame_version: &'static str,
    cli_version: &'static str,
    arguments: Vec<String>,
    /// The scenario after defaults and overrides, enough to rerun exactly.
    resolved_config: &'a ScenarioConfig,
    outputs: Vec<String>,
    details: serde_json::Value,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    loaded: &Loaded,
    outputs: &[&str],
    details: serde_json::Value,
) -> CmdResult {
    let manifest = Manifest {
        command,
        config_source: &loaded.source,
        config_sha256: hex::encode(Sha256::digest(loaded.text.as_bytes())),
        seed: loaded.config.seed,
        hypergame_version: hypergame::VERSION,
        cli_version: env!("CARGO_PKG_VERSION"),
        arguments: std::env::args().collect(),
        resolved_config: &loaded.config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        details,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn cmd_solve(common: &Common) -> CmdResult {
    let loaded = load(common, TABLE_SCENARIO_JSON)?;
    let cfg = &loaded.config;
    let spec = cfg.game_spec()?;
    let theta = cfg.theta_truth()?;
    let started = Instant::now();
    let res = solve_mcp(&spec, &theta, &cfg.solve_options(), None)?;
    let dir = &common.output;
    io::write_iteration_log_csv(&dir.join("solver_log.csv"), &res.history)?;
    let solve_info = json!({
        "status": res.status.as_str(),
        "iterations": res.iterations,
        "final_residual": res.final_residual,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    if !res.converged() {
        write_manifest(dir, "solve", &loaded, &["solver_log.csv"], solve_info)?;
        return Err(fail(
            2,
            format!("solver ended {} after {} iterations (residual {:.3e})", res.status, res.iterations, res.final_residual),
        ));
    }
    let traj = res.trajectory(&spec)?;
    let report = feasibility_report(&spec, &theta, &traj)?;
    io::write_trajectory_csv(&dir.join("trajectory.csv"), &traj, spec.dt())?;
    io::write_json(&dir.join("feasibility.json"), &report)?;
    write_manifest(
        dir,
        "solve",
        &loaded,
        &["trajectory.csv", "feasibility.json", "solver_log.csv"],
        solve_info,
    )?;
    info!("solved in {} iterations, residual {:.3e}", res.iterations, res.final_residual);
    if !report.passes_certificate() {
        return Err(fail(2, format!("solution violates constraints: {report:?}")));
    }
    Ok(())
}

fn cmd_learn(common: &Common, expert_path: &Path, noise_sigma: Option<f64>) -> CmdResult {
    let loaded = load(common, TABLE_SCENARIO_JSON)?;
    let cfg = &loaded.config;
    let spec = cfg.game_spec()?;
    let mut expert = io::read_trajectory_csv(expert_path, &spec)?;
    let dir = &common.output;
    let mut outputs = vec!["learning_trace.csv", "theta_hat.json", "trajectory.csv"];
    if let Some(sigma) = noise_sigma {
        let noise = NoiseModel {
            sigma,
            seed: cfg.seed,
            target: cfg.experiment.noise_target,
        };
        expert = corrupt(&expert, &noise, spec.position_dim())?;
        io::write_trajectory_csv(&dir.join("expert_corrupted.csv"), &expert, spec.dt())?;
        outputs.push("expert_corrupted.csv");
    }
    let outcome = learn_parameters(&spec, &cfg.theta_initial()?, &expert, &cfg.learn_options())?;
    let trace = &outcome.trace;
    io::write_learning_trace_csv(&dir.join("learning_trace.csv"), trace)?;
    let best = &trace.records[trace.best_record];
    io::write_json(
        &dir.join("theta_hat.json"),
        &json!({
            "pairs": outcome.theta.pairs,
            "control_weights": outcome.theta.control_weights,
            "labels": trace.param_labels,
            "values": best.theta,
            "loss": best.loss,
            "iteration": best.iteration,
            "status": trace.status.as_str(),
        }),
    )?;
    let traj = outcome.equilibrium.trajectory(&spec)?;
    io::write_trajectory_csv(&dir.join("trajectory.csv"), &traj, spec.dt())?;
    write_manifest(
        dir,
        "learn",
        &loaded,
        &outputs,
        json!({
            "expert": expert_path.display().to_string(),
            "noise_sigma": noise_sigma,
            "status": trace.status.as_str(),
            "iterations": trace.records.len(),
            "best_iteration": best.iteration,
        }),
    )?;
    info!("learning {} after {} iterations", trace.status.as_str(), trace.records.len());
    Ok(())
}

struct ExperimentFlags {
    trials: Option<usize>,
    levels: Option<Vec<f64>>,
    threads: Option<usize>,
    full_paper_scale: bool,
}

fn cmd_experiment(kind: ExperimentKind, common: &Common, flags: ExperimentFlags) -> CmdResult {
    let fallback = match kind {
        ExperimentKind::MultiRobot => SIX_ROBOT_JSON,
        _ => TABLE_SCENARIO_JSON,
    };
    let loaded = load(common, fallback)?;
    let cfg = &loaded.config;
    let spec = cfg.game_spec()?;
    let dir = &common.output;
    let threads = flags.threads.unwrap_or(cfg.experiment.threads);
    match kind {
        ExperimentKind::NoiseSweep => {
            let mut sweep = if flags.full_paper_scale {
                SweepConfig {
                    target: cfg.experiment.noise_target,
                    ..SweepConfig::full_paper_scale(cfg.seed)
                }
            } else {
                cfg.sweep_config()
            };
            if let Some(levels) = flags.levels {
                sweep.levels = levels;
            }
            if let Some(trials) = flags.trials {
                sweep.trials_per_level = trials;
            }
            sweep.threads = threads;
            let result = noise_sweep(
                &spec,
                &cfg.theta_truth()?,
                &cfg.theta_initial()?,
                &sweep,
                &cfg.learn_options(),
            )?;
            io::write_atomic(&dir.join("trials.csv"), &io::sweep_trials_csv(&result)?)?;
            io::write_atomic(&dir.join("aggregate.csv"), &io::sweep_aggregate_csv(&result)?)?;
            let failures: Vec<_> = result
                .trials
                .iter()
                .filter(|t| t.reconstruction_error.is_none())
                .map(|t| json!({"level": t.level, "trial": t.trial, "status": t.status}))
                .collect();
            write_manifest(
                dir,
                "experiment noise_sweep",
                &loaded,
                &["trials.csv", "aggregate.csv"],
                json!({"sweep": sweep, "failed_trials": failures}),
            )?;
        }
        ExperimentKind::VelocitySweep => {
            let sigmas = flags.levels.unwrap_or_else(|| cfg.velocity_sigmas());
            let trials = flags.trials.unwrap_or(cfg.experiment.velocity_trials);
            let levels = velocity_sensitivity_sweep(
                &spec,
                &cfg.theta_truth()?,
                &sigmas,
                trials,
                cfg.seed,
                &cfg.solve_options(),
                threads,
            )?;
            io::write_atomic(&dir.join("velocity.csv"), &io::velocity_csv(&levels)?)?;
            let rates: Vec<f64> = levels.iter().map(|l| l.success_rate).collect();
            write_manifest(
                dir,
                "experiment velocity_sweep",
                &loaded,
                &["velocity.csv"],
                json!({
                    "velocity_sigmas": sigmas,
                    "trials": trials,
                    "threads": threads,
                    "trend_slope": trend_slope(&sigmas, &rates),
                }),
            )?;
        }
        ExperimentKind::MultiRobot => {
            let learned = PairParams {
                omega: cfg.theta.omega.value(),
                rho: cfg.theta.rho.value(),
            };
            let outcome = multi_robot_generalization(learned, &spec, &cfg.solve_options())?;
            let mut outputs = vec!["outcome.json"];
            if let Some(report) = &outcome.report {
                io::write_json(&dir.join("feasibility.json"), report)?;
                outputs.push("feasibility.json");
            }
            if let Some(sol) = &outcome.solution {
                io::write_trajectory_csv(&dir.join("trajectory.csv"), &sol.trajectory(&spec)?, spec.dt())?;
                outputs.push("trajectory.csv");
            }
            io::write_json(&dir.join("outcome.json"), &outcome)?;
            write_manifest(
                dir,
                "experiment multi_robot",
                &loaded,
                &outputs,
                json!({"omega": learned.omega, "rho": learned.rho, "collision_free": outcome.collision_free()}),
            )?;
            if !outcome.collision_free() {
                let why = outcome.error.clone().unwrap_or_else(|| "solution not collision-free".into());
                return Err(fail(2, why));
            }
        }
    }
    Ok(())
}

fn rows(m: &hypergame::nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_export(common: &Common) -> CmdResult {
    let loaded = load(common, TABLE_SCENARIO_JSON)?;
    let cfg = &loaded.config;
    let constants = cfg.orbit_constants()?;
    let n = constants.mean_motion();
    let (ac, bc) = continuous_hcw(n, constants.satellite_mass);
    let full = hcw_matrices(&constants)?;
    let mut doc = json!({
        "mean_motion_rad_s": n,
        "dt_s": constants.dt,
        "satellite_mass_kg": constants.satellite_mass,
        "state": ["x", "y", "z", "vx", "vy", "vz"],
        "continuous": {"a": rows(&ac), "b": rows(&bc)},
        "discrete": {"a": rows(full.a()), "b": rows(full.b())},
    });
    if cfg.spatial_mode == SpatialMode::Planar {
        let planar = planar_from_full(&full)?;
        doc["planar"] = json!({"a": rows(planar.a()), "b": rows(planar.b())});
    }
    io::write_json(&common.output, &doc)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { common } => cmd_solve(&common),
        Command::Learn {
            common,
            expert,
            noise_sigma,
        } => cmd_learn(&common, &expert, noise_sigma),
        Command::Experiment {
            kind,
            common,
            trials,
            levels,
            threads,
            full_paper_scale,
        } => cmd_experiment(
            kind,
            &common,
            ExperimentFlags {
                trials,
                levels,
                threads,
                full_paper_scale,
            },
        ),
        Command::ExportContinuous { common } => cmd_export(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
