//! Damped semismooth Newton on the Fischer–Burmeister system `F(z; θ) = 0`.
//!
//! Small control weights make the equilibrium conditions badly scaled, so a
//! cold solve walks the control weights down from a large value to their
//! configured values, warm-starting each stage from the previous one.

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{check_initial_separation, objective_value, GameSpec, ThetaParams, Trajectory};
use crate::kkt::{extract_trajectory, KktLayout, KktSystem, MultiplierMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub residual_tol: f64,
    pub backtrack_factor: f64,
    pub armijo_slope: f64,
    pub min_step: f64,
    pub regularization_start: f64,
    pub regularization_growth: f64,
    pub regularization_max: f64,
    pub merit_divergence_cap: f64,
    pub multiplier_mode: MultiplierMode,
    /// First control weight of a cold solve; `None` disables continuation.
    pub continuation_start: Option<f64>,
    /// Ratio between consecutive continuation weights.
    pub continuation_factor: f64,
    /// Extra full Newton steps taken once the tolerance is met.
    pub polish_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 200,
            residual_tol: 1e-6,
            backtrack_factor: 0.5,
            armijo_slope: 1e-4,
            min_step: 1e-10,
            regularization_start: 1e-8,
            regularization_growth: 10.0,
            regularization_max: 1e-2,
            merit_divergence_cap: 1e12,
            multiplier_mode: MultiplierMode::Shared,
            continuation_start: Some(1e-1),
            continuation_factor: 1e-1,
            polish_iterations: 4,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("residual_tol", self.residual_tol),
            ("armijo_slope", self.armijo_slope),
            ("min_step", self.min_step),
            ("regularization_start", self.regularization_start),
            ("regularization_max", self.regularization_max),
            ("merit_divergence_cap", self.merit_divergence_cap),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("solver option {name} must be positive")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config("backtrack_factor must lie in (0, 1)".into()));
        }
        if self.regularization_growth <= 1.0 {
            return Err(Error::Config("regularization_growth must exceed 1".into()));
        }
        if !(self.continuation_factor > 0.0 && self.continuation_factor < 1.0) {
            return Err(Error::Config("continuation_factor must lie in (0, 1)".into()));
        }
        if let Some(c) = self.continuation_start {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("continuation_start must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Diverged,
    Singular,
    /// The line search could not decrease the merit along the Newton or the
    /// steepest-descent direction.
    Stalled,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::Diverged => "diverged",
            SolveStatus::Singular => "singular",
            SolveStatus::Stalled => "stalled",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Largest control weight in force (continuation stage).
    pub control_weight: f64,
    pub residual: f64,
    pub merit: f64,
    pub step: f64,
    pub regularization: f64,
    pub steepest_descent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub z: DVector<f64>,
    pub layout: KktLayout,
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_residual: f64,
    pub history: Vec<IterationLog>,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Equilibrium trajectory of a solve in which every robot decides.
    pub fn trajectory(&self, spec: &GameSpec) -> Result<Trajectory> {
        extract_trajectory(spec, &self.layout, &self.z, None)
    }
}

/// Straight-line guess from each robot's start to its goal. Controls are
/// the least-squares fit of the guessed states to the dynamics; dynamics
/// multipliers are zero and complementarity multipliers start at `1e-2`.
pub fn initial_guess(spec: &GameSpec, layout: &KktLayout) -> Result<DVector<f64>> {
    let mut z = DVector::zeros(layout.len());
    let (s, p) = (layout.state_dim, layout.position_dim);
    let k = layout.steps();
    let a = spec.dynamics().a();
    let b = spec.dynamics().b();
    let b_pinv = b
        .clone()
        .pseudo_inverse(1e-14 * b.amax())
        .map_err(|e| Error::SolverFailure(format!("control pseudo-inverse: {e}")))?;
    let duration = k as f64 * spec.dt();

    for (slot, &robot) in layout.players.iter().enumerate() {
        let x0 = spec.initial_robot_state(robot).into_owned();
        let goal = spec.goal(robot);
        let start = x0.rows(0, p).into_owned();
        let velocity = (&goal - &start) / duration;
        let guess = |t: usize| -> DVector<f64> {
            if t == 0 {
                return x0.clone();
            }
            let f = t as f64 / k as f64;
            let mut x = DVector::zeros(s);
            x.rows_mut(0, p).copy_from(&(&start * (1.0 - f) + &goal * f));
            x.rows_mut(p, p).copy_from(&velocity);
            x
        };
        for t in 1..=k {
            z.rows_mut(layout.x_index(slot, t), s).copy_from(&guess(t));
        }
        for t in 0..k {
            let u = &b_pinv * (guess(t + 1) - a * guess(t));
            z.rows_mut(layout.u_index(slot, t), layout.control_dim).copy_from(&u);
        }
    }
    for i in layout.complementarity_range() {
        z[i] = 1e-2;
    }
    Ok(z)
}

/// Forward solve of the game at `theta`. A warm start whose layout matches
/// is tried first; if it does not converge the solve restarts cold.
pub fn solve_mcp(
    spec: &GameSpec,
    theta: &ThetaParams,
    options: &SolveOptions,
    warm_start: Option<&SolveResult>,
) -> Result<SolveResult> {
    options.validate()?;
    theta.validate(spec)?;
    check_initial_separation(spec, theta)?;
    let mut system = KktSystem::new(spec, theta, options.multiplier_mode)?;
    if let Some(ws) = warm_start {
        if ws.layout == *system.layout() {
            let warm = newton(&system, ws.z.clone(), options, options.max_iterations, Vec::new())?;
            if warm.converged() {
                return Ok(warm);
            }
            debug!("warm start ended {}; restarting cold", warm.status);
        }
    }
    let z0 = initial_guess(spec, system.layout())?;
    solve_with_continuation(&mut system, z0, options)
}

/// Cold solve of an arbitrary system (used for restricted player sets).
pub fn solve_with_continuation(
    system: &mut KktSystem<'_>,
    z0: DVector<f64>,
    options: &SolveOptions,
) -> Result<SolveResult> {
    let target = system.control_weights().to_vec();
    let top = target.iter().copied().fold(0.0f64, f64::max);
    let mut stages = Vec::new();
    if let Some(mut c) = options.continuation_start {
        while c > top && c > 1e-8 {
            stages.push(target.iter().map(|&w| w.max(c)).collect::<Vec<_>>());
            c *= options.continuation_factor;
        }
    }
    stages.push(target.clone());

    let mut z = z0;
    let mut history = Vec::new();
    let last = stages.len() - 1;
    let mut result = None;
    for (k, weights) in stages.into_iter().enumerate() {
        system.set_control_weights(weights)?;
        let used = history.len();
        let budget = options.max_iterations.saturating_sub(used).max(1);
        let r = newton(system, z, options, budget, history)?;
        if k == last {
            result = Some(r);
            break;
        }
        if matches!(r.status, SolveStatus::Singular | SolveStatus::Diverged) {
            system.set_control_weights(target)?;
            return Ok(r);
        }
        z = r.z;
        history = r.history;
    }
    system.set_control_weights(target)?;
    Ok(result.expect("final stage always runs"))
}

/// Newton iterations at the system's current control weights. `history`
/// carries the iteration log of earlier continuation stages.
fn newton(
    system: &KktSystem<'_>,
    z0: DVector<f64>,
    options: &SolveOptions,
    budget: usize,
    mut history: Vec<IterationLog>,
) -> Result<SolveResult> {
    let weight = system.control_weights().iter().copied().fold(0.0f64, f64::max);
    let mut z = z0;
    let mut f = system.residual(&z)?;
    let mut merit = 0.5 * f.norm_squared();
    let mut best = (z.clone(), f.amax());
    let first = history.len();

    let finish = |z: DVector<f64>, status, history: Vec<IterationLog>, residual| {
        Ok(SolveResult {
            z,
            layout: system.layout().clone(),
            status,
            iterations: history.len(),
            final_residual: residual,
            history,
        })
    };

    for it in 0..budget {
        let residual = f.amax();
        if !residual.is_finite() || merit > options.merit_divergence_cap {
            return finish(best.0, SolveStatus::Diverged, history, best.1);
        }
        if residual <= options.residual_tol {
            let z = polish(system, z, f, options, weight, &mut history)?;
            let (z, residual) = snap_inactive_multipliers(system, z, options.residual_tol)?;
            return finish(z, SolveStatus::Converged, history, residual);
        }

        let jac = system.jacobian(&z)?;
        let rhs = -&f;
        let mut shift = 0.0;
        let direction = loop {
            match jac.solve_shifted(shift, &rhs) {
                Ok(d) => break Some(d),
                Err(e) => {
                    trace!("factorization failed at shift {shift:.1e}: {e}");
                    shift = if shift == 0.0 {
                        options.regularization_start
                    } else {
                        shift * options.regularization_growth
                    };
                    if shift > options.regularization_max * (1.0 + 1e-12) {
                        break None;
                    }
                }
            }
        };
        let Some(newton_dir) = direction else {
            return finish(best.0, SolveStatus::Singular, history, best.1);
        };

        let grad = jac.tr_mul_vec(&f);
        let mut candidates = Vec::with_capacity(2);
        let newton_slope = grad.dot(&newton_dir);
        if newton_slope < 0.0 && newton_slope.is_finite() {
            candidates.push((newton_dir, newton_slope, false));
        }
        let g2 = grad.norm_squared();
        if g2 > 0.0 {
            candidates.push((-&grad, -g2, true));
        }

        let mut accepted = None;
        'directions: for (dir, slope, steepest) in candidates {
            let mut step = 1.0;
            while step >= options.min_step {
                let trial = &z + &dir * step;
                let f_trial = system.residual(&trial)?;
                let m_trial = 0.5 * f_trial.norm_squared();
                if m_trial.is_finite() && m_trial <= merit + options.armijo_slope * step * slope {
                    accepted = Some((trial, f_trial, m_trial, step, steepest));
                    break 'directions;
                }
                step *= options.backtrack_factor;
            }
        }
        let Some((z_new, f_new, m_new, step, steepest)) = accepted else {
            return finish(best.0, SolveStatus::Stalled, history, best.1);
        };

        z = z_new;
        f = f_new;
        merit = m_new;
        if f.amax() < best.1 {
            best = (z.clone(), f.amax());
        }
        history.push(IterationLog {
            iteration: first + it + 1,
            control_weight: weight,
            residual: f.amax(),
            merit,
            step,
            regularization: shift,
            steepest_descent: steepest,
        });
        trace!("iter {} residual {:.3e} step {:.2e}", first + it + 1, f.amax(), step);
    }

    let residual = f.amax();
    if residual <= options.residual_tol {
        let z = polish(system, z, f, options, weight, &mut history)?;
        let (z, residual) = snap_inactive_multipliers(system, z, options.residual_tol)?;
        return finish(z, SolveStatus::Converged, history, residual);
    }
    finish(best.0, SolveStatus::MaxIterations, history, best.1)
}

/// Full Newton steps past the tolerance while they keep reducing the
/// residual, so active bounds hold to rounding rather than to `residual_tol`.
fn polish(
    system: &KktSystem<'_>,
    mut z: DVector<f64>,
    mut f: DVector<f64>,
    options: &SolveOptions,
    weight: f64,
    history: &mut Vec<IterationLog>,
) -> Result<DVector<f64>> {
    for _ in 0..options.polish_iterations {
        let residual = f.amax();
        if residual <= 1e-13 {
            break;
        }
        let Ok(dir) = system.jacobian(&z)?.solve_shifted(0.0, &(-&f)) else {
            break;
        };
        let trial = &z + dir;
        let f_trial = system.residual(&trial)?;
        if !(f_trial.amax() < residual && f_trial.norm_squared() < f.norm_squared()) {
            break;
        }
        z = trial;
        f = f_trial;
        history.push(IterationLog {
            iteration: history.len() + 1,
            control_weight: weight,
            residual: f.amax(),
            merit: 0.5 * f.norm_squared(),
            step: 1.0,
            regularization: 0.0,
            steepest_descent: false,
        });
    }
    Ok(z)
}

/// Sets multipliers of clearly inactive constraints to exactly zero when
/// doing so keeps the residual within tolerance.
fn snap_inactive_multipliers(
    system: &KktSystem<'_>,
    z: DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, f64)> {
    let mut snapped = z.clone();
    let mut changed = false;
    for i in system.layout().complementarity_range() {
        let b = snapped[i];
        if b == 0.0 || b.abs() > tol {
            continue;
        }
        if let Some(a) = system.complementarity_argument(&z, i) {
            if a > 1e3 * b.abs() && a > tol {
                snapped[i] = 0.0;
                changed = true;
            }
        }
    }
    let original = system.residual(&z)?.amax();
    if !changed {
        return Ok((z, original));
    }
    let r = system.residual(&snapped)?.amax();
    if r <= tol {
        Ok((snapped, r))
    } else {
        Ok((z, original))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub robot: usize,
    pub equilibrium_cost: f64,
    pub best_response_cost: Option<f64>,
    /// `J^i(equilibrium) − J^i(best response)`; `None` when the inner solve
    /// failed and the check is inconclusive.
    pub improvement: Option<f64>,
    pub status: SolveStatus,
}

impl BestResponse {
    /// Improvement within `rel_tol · (1 + |J^i|)`.
    pub fn is_equilibrium(&self, rel_tol: f64) -> Option<bool> {
        self.improvement
            .map(|d| d <= rel_tol * (1.0 + self.equilibrium_cost.abs()))
    }
}

/// Re-solves robot `robot`'s problem with everyone else frozen at the
/// trajectory in `z_star`, starting cold, and compares costs. The robot's
/// equilibrium cost is evaluated on its controls re-propagated through the
/// dynamics.
pub fn best_response_check(
    spec: &GameSpec,
    theta: &ThetaParams,
    z_star: &SolveResult,
    robot: usize,
    options: &SolveOptions,
) -> Result<BestResponse> {
    if !z_star.converged() {
        return Err(Error::Precondition("best-response check needs a converged solve".into()));
    }
    if robot >= spec.num_robots() {
        return Err(Error::Config(format!("robot {robot} out of range")));
    }
    let eq = z_star.trajectory(spec)?;
    let eq = Trajectory::from_controls(spec, eq.controls().clone())?;
    let equilibrium_cost = objective_value(spec, theta, &eq, robot);

    let br_options = SolveOptions {
        multiplier_mode: MultiplierMode::Shared,
        ..options.clone()
    };
    let mut system = KktSystem::with_players(spec, theta, &[robot], &eq, MultiplierMode::Shared)?;
    let z0 = initial_guess(spec, system.layout())?;
    let result = solve_with_continuation(&mut system, z0, &br_options)?;
    if !result.converged() {
        return Ok(BestResponse {
            robot,
            equilibrium_cost,
            best_response_cost: None,
            improvement: None,
            status: result.status,
        });
    }
    let br = system.trajectory(&result.z)?;
    let best_response_cost = objective_value(spec, theta, &br, robot);
    Ok(BestResponse {
        robot,
        equilibrium_cost,
        best_response_cost: Some(best_response_cost),
        improvement: Some(equilibrium_cost - best_response_cost),
        status: result.status,
    })
}

/// Dense view of the iteration log, one row per iteration:
/// iteration, control weight, residual, merit, step, regularization.
pub fn history_matrix(history: &[IterationLog]) -> DMatrix<f64> {
    DMatrix::from_fn(history.len(), 6, |r, c| {
        let h = &history[r];
        match c {
            0 => h.iteration as f64,
            1 => h.control_weight,
            2 => h.residual,
            3 => h.merit,
            4 => h.step,
            _ => h.regularization,
        }
    })
}
