//! Experiments: noisy expert generation, learning sweeps, reconstruction
//! error, multi-robot reuse of learned parameters, initial-velocity
//! robustness and the out-of-plane extension.
//!
//! Every trial draws from its own ChaCha stream keyed by
//! `(base_seed, level, trial)`, so results do not depend on scheduling.

use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearDynamics;
use crate::error::{Error, Result};
use crate::game::{feasibility_report, FeasibilityReport, GameSpec, PairParams, ThetaParams, Trajectory};
use crate::learner::{learn_parameters, LearnOptions};
use crate::solver::{solve_mcp, SolveOptions, SolveResult, SolveStatus};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    FullState,
    PositionsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation, m for positions and m/s for velocities.
    pub sigma: f64,
    pub seed: u64,
    pub target: NoiseTarget,
}

/// ChaCha stream for one trial of one level.
pub fn trial_rng(base_seed: u64, level: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(((level as u64) << 32) | trial as u64);
    rng
}

/// Seed for [`NoiseModel`] derived from a trial's stream.
pub fn trial_seed(base_seed: u64, level: usize, trial: usize) -> u64 {
    use rand::RngCore;
    trial_rng(base_seed, level, trial).next_u64()
}

/// Equilibrium trajectory at `theta_truth`, checked for feasibility.
pub fn generate_expert(
    spec: &GameSpec,
    theta_truth: &ThetaParams,
    options: &SolveOptions,
) -> Result<(Trajectory, SolveResult)> {
    let res = solve_mcp(spec, theta_truth, options, None)?;
    if !res.converged() {
        return Err(Error::SolverFailure(format!(
            "expert solve ended {} after {} iterations (residual {:.3e})",
            res.status, res.iterations, res.final_residual
        )));
    }
    let traj = res.trajectory(spec)?;
    let report = feasibility_report(spec, theta_truth, &traj)?;
    if !report.passes_certificate() {
        return Err(Error::SolverFailure(format!("expert trajectory infeasible: {report:?}")));
    }
    Ok((traj, res))
}

/// Adds i.i.d. Gaussian noise to the targeted state entries. Controls are
/// left untouched.
pub fn corrupt(expert: &Trajectory, noise: &NoiseModel, position_dim: usize) -> Result<Trajectory> {
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(Error::Domain(format!("noise sigma must be >= 0, got {}", noise.sigma)));
    }
    let mut out = expert.clone();
    if noise.sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let s = expert.state_dim();
    let states = out.states_mut();
    for t in 0..states.nrows() {
        for c in 0..states.ncols() {
            let component = c % s;
            if noise.target == NoiseTarget::PositionsOnly && component >= position_dim {
                continue;
            }
            states[(t, c)] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// `D = 1/(N·T) Σ_i Σ_t ‖p^i_t − p̂^i_t‖²` between two trajectories.
pub fn reconstruction_error_between(spec: &GameSpec, a: &Trajectory, b: &Trajectory) -> Result<f64> {
    a.check_shape(spec)?;
    b.check_shape(spec)?;
    let (s, p) = (spec.state_dim(), spec.position_dim());
    let mut sum = 0.0;
    for t in 0..spec.horizon() {
        for i in 0..spec.num_robots() {
            for r in 0..p {
                let d = a.states()[(t, i * s + r)] - b.states()[(t, i * s + r)];
                sum += d * d;
            }
        }
    }
    Ok(sum / (spec.num_robots() * spec.horizon()) as f64)
}

/// Reconstruction error between the equilibria of two parameter sets.
pub fn reconstruction_error(
    spec: &GameSpec,
    theta_truth: &ThetaParams,
    theta_learned: &ThetaParams,
    options: &SolveOptions,
) -> Result<f64> {
    let solve = |theta: &ThetaParams| -> Result<Trajectory> {
        let res = solve_mcp(spec, theta, options, None)?;
        if !res.converged() {
            return Err(Error::SolverFailure(format!("reconstruction solve ended {}", res.status)));
        }
        res.trajectory(spec)
    };
    reconstruction_error_between(spec, &solve(theta_truth)?, &solve(theta_learned)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub levels: Vec<f64>,
    pub trials_per_level: usize,
    pub base_seed: u64,
    pub target: NoiseTarget,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            levels: vec![0.0, 2.5, 5.0, 10.0, 20.0],
            trials_per_level: 5,
            base_seed: 2024,
            target: NoiseTarget::FullState,
            threads: 0,
        }
    }
}

impl SweepConfig {
    /// The large design: 20 levels from 0 to 20 with 20 trials each.
    pub fn full_paper_scale(base_seed: u64) -> Self {
        SweepConfig {
            levels: (0..20).map(|k| 20.0 * k as f64 / 19.0).collect(),
            trials_per_level: 20,
            base_seed,
            ..SweepConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub level: usize,
    pub sigma: f64,
    pub trial: usize,
    pub seed: u64,
    /// Learned entries in natural units, labelled by `SweepResult::param_labels`.
    pub theta_hat: Vec<f64>,
    pub reconstruction_error: Option<f64>,
    pub status: String,
    pub learn_iterations: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAggregate {
    pub sigma: f64,
    pub trials: usize,
    pub failures: usize,
    pub reconstruction_error: Option<Summary>,
    /// One summary per learnable parameter.
    pub theta_hat: Vec<Option<Summary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param_labels: Vec<String>,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<LevelAggregate>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary {
        median: quantile(&v, 0.5),
        q25: quantile(&v, 0.25),
        q75: quantile(&v, 0.75),
    })
}

/// Per-level medians and quartiles of a set of trials.
pub fn aggregate(levels: &[f64], trials: &[TrialRecord], num_params: usize) -> Vec<LevelAggregate> {
    levels
        .iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.level == k).collect();
            let d: Vec<f64> = rows.iter().filter_map(|t| t.reconstruction_error).collect();
            let theta_hat = (0..num_params)
                .map(|p| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|t| t.reconstruction_error.is_some())
                        .map(|t| t.theta_hat[p])
                        .collect();
                    summarize(&vals)
                })
                .collect();
            LevelAggregate {
                sigma,
                trials: rows.len(),
                failures: rows.len() - d.len(),
                reconstruction_error: summarize(&d),
                theta_hat,
            }
        })
        .collect()
}

fn run_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Learns from noise-corrupted copies of the expert at each noise level.
/// Individual trial failures are recorded and the sweep continues.
pub fn noise_sweep(
    spec: &GameSpec,
    theta_truth: &ThetaParams,
    theta0: &ThetaParams,
    sweep: &SweepConfig,
    learn: &LearnOptions,
) -> Result<SweepResult> {
    if sweep.levels.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
        return Err(Error::Config("noise levels must be >= 0".into()));
    }
    let (expert, _) = generate_expert(spec, theta_truth, &learn.solver)?;
    let labels: Vec<String> = theta0.learnable.iter().map(|p| p.label()).collect();
    let work: Vec<(usize, usize)> = (0..sweep.levels.len())
        .flat_map(|l| (0..sweep.trials_per_level).map(move |t| (l, t)))
        .collect();

    let run_trial = |&(level, trial): &(usize, usize)| -> TrialRecord {
        let started = Instant::now();
        let sigma = sweep.levels[level];
        let seed = trial_seed(sweep.base_seed, level, trial);
        let noise = NoiseModel {
            sigma,
            seed,
            target: sweep.target,
        };
        let outcome = corrupt(&expert, &noise, spec.position_dim())
            .and_then(|noisy| learn_parameters(spec, theta0, &noisy, learn))
            .and_then(|out| {
                let learned = out.equilibrium.trajectory(spec)?;
                let d = reconstruction_error_between(spec, &expert, &learned)?;
                Ok((out, d))
            });
        let record = match outcome {
            Ok((out, d)) => TrialRecord {
                level,
                sigma,
                trial,
                seed,
                theta_hat: out.theta.natural_vector(spec),
                reconstruction_error: Some(d),
                status: out.trace.status.as_str().to_string(),
                learn_iterations: out.trace.records.len(),
                wall_time_s: started.elapsed().as_secs_f64(),
            },
            Err(e) => {
                warn!("sigma {sigma} trial {trial} failed: {e}");
                TrialRecord {
                    level,
                    sigma,
                    trial,
                    seed,
                    theta_hat: vec![f64::NAN; labels.len()],
                    reconstruction_error: None,
                    status: format!("error: {e}"),
                    learn_iterations: 0,
                    wall_time_s: started.elapsed().as_secs_f64(),
                }
            }
        };
        info!(
            "sigma {sigma} trial {trial}: D = {:?} ({})",
            record.reconstruction_error, record.status
        );
        record
    };

    let trials: Vec<TrialRecord> =
        run_pool(sweep.threads, || work.par_iter().map(run_trial).collect())?;
    let aggregates = aggregate(&sweep.levels, &trials, labels.len());
    Ok(SweepResult {
        param_labels: labels,
        trials,
        aggregates,
    })
}

/// `true` when `median D` never decreases across levels, allowing
/// `tolerated` adjacent inversions.
pub fn is_nondecreasing(values: &[f64], tolerated: usize) -> bool {
    values.windows(2).filter(|w| w[1] < w[0]).count() <= tolerated
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRobotOutcome {
    pub status: Option<SolveStatus>,
    pub error: Option<String>,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    pub report: Option<FeasibilityReport>,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub solution: Option<SolveResult>,
}

impl MultiRobotOutcome {
    pub fn collision_free(&self) -> bool {
        self.status == Some(SolveStatus::Converged)
            && self.report.as_ref().map_or(false, |r| r.passes_certificate())
    }
}

/// Forward-solves a larger game reusing one learned `(ω, ρ)` for every
/// pair. Solver failures and infeasible geometry are returned as data.
pub fn multi_robot_generalization(
    learned: PairParams,
    spec: &GameSpec,
    options: &SolveOptions,
) -> Result<MultiRobotOutcome> {
    let theta = ThetaParams {
        pairs: vec![learned; spec.pairs().len()],
        control_weights: None,
        learnable: Vec::new(),
    };
    let started = Instant::now();
    match solve_mcp(spec, &theta, options, None) {
        Ok(res) => {
            let traj = res.trajectory(spec)?;
            let report = feasibility_report(spec, &theta, &traj)?;
            Ok(MultiRobotOutcome {
                status: Some(res.status),
                error: None,
                iterations: res.iterations,
                final_residual: Some(res.final_residual),
                report: Some(report),
                wall_time_s: started.elapsed().as_secs_f64(),
                solution: Some(res),
            })
        }
        Err(e @ (Error::InfeasibleGeometry { .. } | Error::SolverFailure(_))) => Ok(MultiRobotOutcome {
            status: None,
            error: Some(e.to_string()),
            iterations: 0,
            final_residual: None,
            report: None,
            wall_time_s: started.elapsed().as_secs_f64(),
            solution: None,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityLevel {
    pub sigma: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Success rate of forward solves whose initial velocities are perturbed
/// by i.i.d. Gaussian noise. Success means converged and feasible.
pub fn velocity_sensitivity_sweep(
    spec: &GameSpec,
    theta: &ThetaParams,
    velocity_sigmas: &[f64],
    trials: usize,
    base_seed: u64,
    options: &SolveOptions,
    threads: usize,
) -> Result<Vec<VelocityLevel>> {
    let (s, p) = (spec.state_dim(), spec.position_dim());
    for i in 0..spec.num_robots() {
        let x = spec.initial_robot_state(i);
        if (p..2 * p).any(|r| x[r] != 0.0) {
            return Err(Error::Precondition("nominal initial velocities must be zero".into()));
        }
    }
    let nominal = solve_mcp(spec, theta, options, None)?;
    let work: Vec<(usize, usize)> = (0..velocity_sigmas.len())
        .flat_map(|l| (0..trials).map(move |t| (l, t)))
        .collect();
    let run = |&(level, trial): &(usize, usize)| -> bool {
        let sigma = velocity_sigmas[level];
        let mut x0 = spec.initial_state().clone();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            let mut rng = trial_rng(base_seed, level, trial);
            for i in 0..spec.num_robots() {
                for r in p..2 * p {
                    x0[i * s + r] += normal.sample(&mut rng);
                }
            }
        }
        let attempt = || -> Result<bool> {
            let perturbed = spec.with_initial_state(x0)?;
            let warm = nominal.converged().then_some(&nominal);
            let res = solve_mcp(&perturbed, theta, options, warm)?;
            if !res.converged() {
                return Ok(false);
            }
            let report = feasibility_report(&perturbed, theta, &res.trajectory(&perturbed)?)?;
            Ok(report.passes_certificate())
        };
        attempt().unwrap_or(false)
    };
    if velocity_sigmas.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Config("velocity sigmas must be >= 0".into()));
    }
    let outcomes: Vec<bool> = run_pool(threads, || work.par_iter().map(run).collect())?;
    Ok(velocity_sigmas
        .iter()
        .enumerate()
        .map(|(level, &sigma)| {
            let successes = work
                .iter()
                .zip(&outcomes)
                .filter(|((l, _), ok)| *l == level && **ok)
                .count();
            VelocityLevel {
                sigma,
                trials,
                successes,
                success_rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
            }
        })
        .collect())
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn trend_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Initial and goal out-of-plane conditions per robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfPlaneProfile {
    /// `(z, ż)` at the initial step.
    pub initial: Vec<[f64; 2]>,
    pub goals: Vec<f64>,
}

impl OutOfPlaneProfile {
    pub fn zeros(num_robots: usize) -> Self {
        OutOfPlaneProfile {
            initial: vec![[0.0, 0.0]; num_robots],
            goals: vec![0.0; num_robots],
        }
    }
}

/// Solves each robot's decoupled out-of-plane problem and stacks it with
/// the planar trajectory into `(x, y, z, ẋ, ẏ, ż)` states and
/// `(u_x, u_y, u_z)` controls.
pub fn embed_3d(
    planar_spec: &GameSpec,
    planar: &Trajectory,
    out_of_plane: &LinearDynamics,
    profile: &OutOfPlaneProfile,
    options: &SolveOptions,
) -> Result<Trajectory> {
    planar.check_shape(planar_spec)?;
    let n = planar_spec.num_robots();
    if profile.initial.len() != n || profile.goals.len() != n {
        return Err(Error::Dimension {
            what: "out-of-plane profile",
            expected: n,
            got: profile.initial.len().min(profile.goals.len()),
        });
    }
    if out_of_plane.state_dim() != 2 || out_of_plane.control_dim() != 1 {
        return Err(Error::Dimension {
            what: "out-of-plane state",
            expected: 2,
            got: out_of_plane.state_dim(),
        });
    }
    if planar_spec.state_dim() != 4 {
        return Err(Error::Dimension {
            what: "planar state",
            expected: 4,
            got: planar_spec.state_dim(),
        });
    }
    let horizon = planar_spec.horizon();
    let mut states = DMatrix::zeros(horizon, n * 6);
    let mut controls = DMatrix::zeros(horizon - 1, n * 3);
    for i in 0..n {
        let axis_spec = GameSpec::new(
            out_of_plane.clone(),
            horizon,
            planar_spec.dt(),
            DVector::from_vec(profile.initial[i].to_vec()),
            DMatrix::from_element(1, 1, profile.goals[i]),
            vec![planar_spec.control_weights()[i]],
            planar_spec.thrust_limit(),
            Vec::new(),
        )?;
        let theta = ThetaParams {
            pairs: Vec::new(),
            control_weights: None,
            learnable: Vec::new(),
        };
        let axis = if profile.initial[i] == [0.0, 0.0] && profile.goals[i] == 0.0 {
            Trajectory::zeros(&axis_spec)
        } else {
            let res = solve_mcp(&axis_spec, &theta, options, None)?;
            if !res.converged() {
                return Err(Error::SolverFailure(format!(
                    "out-of-plane solve for robot {i} ended {}",
                    res.status
                )));
            }
            res.trajectory(&axis_spec)?
        };
        for t in 0..horizon {
            let (xy, z) = (planar.state(t, i), axis.state(t, 0));
            let row = [xy[0], xy[1], z[0], xy[2], xy[3], z[1]];
            for (r, v) in row.into_iter().enumerate() {
                states[(t, i * 6 + r)] = v;
            }
        }
        for t in 0..horizon - 1 {
            let (uxy, uz) = (planar.control(t, i), axis.control(t, 0));
            controls[(t, i * 3)] = uxy[0];
            controls[(t, i * 3 + 1)] = uxy[1];
            controls[(t, i * 3 + 2)] = uz[0];
        }
    }
    Trajectory::new(n, 6, 3, states, controls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.25), 1.75);
    }

    #[test]
    fn trial_streams_are_independent_and_reproducible() {
        assert_eq!(trial_seed(7, 1, 2), trial_seed(7, 1, 2));
        assert_ne!(trial_seed(7, 1, 2), trial_seed(7, 2, 1));
        assert_ne!(trial_seed(7, 0, 0), trial_seed(8, 0, 0));
    }

    #[test]
    fn slope_and_monotonicity() {
        assert!((trend_slope(&[0.0, 1.0, 2.0], &[1.0, 0.5, 0.0]) + 0.5).abs() < 1e-15);
        assert_eq!(trend_slope(&[0.0, 1.0], &[1.0, 1.0]), 0.0);
        assert!(is_nondecreasing(&[0.0, 1.0, 0.5, 2.0], 1));
        assert!(!is_nondecreasing(&[0.0, 1.0, 0.5, 0.4], 1));
    }
}
