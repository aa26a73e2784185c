//! Gradient-based recovery of hyperplane parameters from an observed
//! trajectory, with Adam scaling.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{check_initial_separation, GameSpec, ParamKind, ThetaParams, Trajectory};
use crate::sensitivity::{loss_gradient, solution_sensitivity, trajectory_loss, LossTarget};
use crate::solver::{solve_mcp, SolveOptions, SolveResult, SolveStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: DVector<f64>,
    pub second_moment: DVector<f64>,
    pub step_count: u64,
    pub learning_rates: DVector<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
}

impl AdamState {
    pub fn new(learning_rates: DVector<f64>, beta1: f64, beta2: f64, epsilon_hat: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        if !(epsilon_hat > 0.0) || learning_rates.iter().any(|&a| !(a.is_finite() && a >= 0.0)) {
            return Err(Error::Config("Adam learning rates and epsilon must be positive".into()));
        }
        let n = learning_rates.len();
        Ok(AdamState {
            first_moment: DVector::zeros(n),
            second_moment: DVector::zeros(n),
            step_count: 0,
            learning_rates,
            beta1,
            beta2,
            epsilon_hat,
        })
    }

    /// Same learning rate for every parameter.
    pub fn uniform(n: usize, learning_rate: f64) -> Result<Self> {
        AdamState::new(DVector::from_element(n, learning_rate), 0.9, 0.999, 1e-8)
    }

    /// Bias-corrected Adam update. Returns the delta to subtract from θ.
    pub fn step(&mut self, gradient: &DVector<f64>) -> Result<DVector<f64>> {
        if gradient.len() != self.first_moment.len() {
            return Err(Error::Dimension {
                what: "Adam gradient",
                expected: self.first_moment.len(),
                got: gradient.len(),
            });
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        self.first_moment = &self.first_moment * b1 + gradient * (1.0 - b1);
        self.second_moment = &self.second_moment * b2 + gradient.component_mul(gradient) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        Ok(DVector::from_fn(gradient.len(), |i, _| {
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            self.learning_rates[i] * m_hat / (v_hat.sqrt() + self.epsilon_hat)
        }))
    }
}

/// Step sizes per kind of parameter, in learning coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub omega: f64,
    pub log_rho: f64,
    pub log_xi: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            omega: 1e-3,
            log_rho: 0.1,
            log_xi: 0.1,
        }
    }
}

impl LearningRates {
    pub fn for_kind(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Omega => self.omega,
            ParamKind::Rho => self.log_rho,
            ParamKind::Xi => self.log_xi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
    /// Times a failing step is halved before giving up.
    pub retreat_attempts: usize,
    pub loss_target: LossTarget,
    pub solver: SolveOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions {
            max_iterations: 30,
            gradient_tol: 1e-4,
            learning_rates: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
            retreat_attempts: 3,
            loss_target: LossTarget::FullState,
            solver: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnStatus {
    Converged,
    BudgetExhausted,
    SolverFailed,
}

impl LearnStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnStatus::Converged => "converged",
            LearnStatus::BudgetExhausted => "budget_exhausted",
            LearnStatus::SolverFailed => "solver_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnRecord {
    pub iteration: usize,
    /// Learnable entries in natural units.
    pub theta: Vec<f64>,
    pub loss: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub solver_status: SolveStatus,
    pub solver_iterations: usize,
    /// Halvings needed before the forward solve at this θ converged.
    pub retreats: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningTrace {
    pub param_labels: Vec<String>,
    pub records: Vec<LearnRecord>,
    pub status: LearnStatus,
    /// Index into `records` of the lowest loss.
    pub best_record: usize,
}

impl LearningTrace {
    /// Converged on the first iteration: the gradient already vanished at θ0.
    pub fn stationary_at_start(&self) -> bool {
        self.status == LearnStatus::Converged && self.records.len() == 1
    }

    /// Lowest loss seen up to and including each iteration.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                if let Some(l) = r.loss {
                    best = best.min(l);
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnOutcome {
    /// Lowest-loss parameters visited.
    pub theta: ThetaParams,
    pub trace: LearningTrace,
    /// Equilibrium at `theta`.
    pub equilibrium: SolveResult,
}

/// Runs gradient descent on `ℓ(x*(θ), x̃)` from `theta0` until the gradient
/// norm drops below the tolerance or the iteration budget runs out.
pub fn learn_parameters(
    spec: &GameSpec,
    theta0: &ThetaParams,
    expert: &Trajectory,
    options: &LearnOptions,
) -> Result<LearnOutcome> {
    expert.check_shape(spec)?;
    theta0.validate(spec)?;
    check_initial_separation(spec, theta0)?;
    if options.max_iterations == 0 {
        return Err(Error::Config("learner needs at least one iteration".into()));
    }
    let labels = theta0.learnable.iter().map(|p| p.label()).collect();
    let rates = DVector::from_iterator(
        theta0.learnable.len(),
        theta0
            .learnable
            .iter()
            .map(|p| options.learning_rates.for_kind(p.kind)),
    );
    let mut adam = AdamState::new(rates, options.beta1, options.beta2, options.epsilon_hat)?;

    let started = Instant::now();
    let mut theta = theta0.clone();
    let mut internal = DVector::from_vec(theta.internal_vector(spec));
    let mut current = solve_mcp(spec, &theta, &options.solver, None)?;
    if !current.converged() {
        return Err(Error::SolverFailure(format!(
            "forward solve at the initial parameters ended {}",
            current.status
        )));
    }

    let mut records: Vec<LearnRecord> = Vec::new();
    let mut best: Option<(f64, usize, ThetaParams, SolveResult)> = None;
    let mut retreats = 0;
    let mut status = LearnStatus::BudgetExhausted;

    for iteration in 1..=options.max_iterations {
        let traj = current.trajectory(spec)?;
        let loss = trajectory_loss(spec, &traj, expert, options.loss_target)?;
        let sens = solution_sensitivity(spec, &theta, &current)?;
        let grad = loss_gradient(spec, &current, &sens, expert, options.loss_target)?;
        let grad_norm = grad.norm();
        records.push(LearnRecord {
            iteration,
            theta: theta.natural_vector(spec),
            loss: Some(loss),
            gradient_norm: Some(grad_norm),
            solver_status: current.status,
            solver_iterations: current.iterations,
            retreats,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        debug!("learn iter {iteration}: loss {loss:.6e} |grad| {grad_norm:.3e}");
        if best.as_ref().map_or(true, |b| loss < b.0) {
            best = Some((loss, records.len() - 1, theta.clone(), current.clone()));
        }
        if grad_norm < options.gradient_tol {
            status = LearnStatus::Converged;
            break;
        }
        if iteration == options.max_iterations {
            break;
        }

        let mut delta = adam.step(&grad)?;
        retreats = 0;
        let mut next = None;
        for attempt in 0..=options.retreat_attempts {
            if attempt > 0 {
                delta *= 0.5;
                retreats = attempt;
            }
            let candidate_internal = &internal - &delta;
            let mut candidate = theta.clone();
            candidate.set_internal(spec, candidate_internal.as_slice())?;
            if check_initial_separation(spec, &candidate).is_err() {
                warn!("step {iteration} leaves the keep-out radius above the initial separation; halving");
                continue;
            }
            match solve_mcp(spec, &candidate, &options.solver, Some(&current)) {
                Ok(res) if res.converged() => {
                    next = Some((candidate_internal, candidate, res));
                    break;
                }
                Ok(res) => warn!("forward solve at step {iteration} ended {}; halving", res.status),
                Err(e) => warn!("forward solve at step {iteration} failed: {e}; halving"),
            }
        }
        match next {
            Some((i, th, res)) => {
                internal = i;
                theta = th;
                current = res;
            }
            None => {
                status = LearnStatus::SolverFailed;
                break;
            }
        }
    }

    let (_, best_record, best_theta, best_solution) = best.expect("at least one iteration recorded");
    Ok(LearnOutcome {
        theta: best_theta,
        trace: LearningTrace {
            param_labels: labels,
            records,
            status,
            best_record,
        },
        equilibrium: best_solution,
    })
}
