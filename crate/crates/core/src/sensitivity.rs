//! Derivatives of an equilibrium with respect to the learnable parameters,
//! by the implicit function theorem on `F(z; θ) = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameSpec, LearnableParam, ThetaParams, Trajectory};
use crate::kkt::KktSystem;
use crate::linalg::{min_norm_least_squares, DenseLu};
use crate::solver::SolveResult;

/// Pivot ratio below which the direct solve gives way to least squares.
pub const PIVOT_RATIO_THRESHOLD: f64 = 1e-13;

/// Residual level a solution must reach before it is differentiated.
pub const CONVERGENCE_REQUIREMENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMethod {
    Direct,
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    /// `∂z*/∂θ`, one column per learnable parameter (learning coordinates).
    pub dz_dtheta: DMatrix<f64>,
    /// Smallest pivot magnitude of the LU factorization of `∂F/∂z`.
    pub conditioning: f64,
    pub method: SensitivityMethod,
    pub params: Vec<LearnableParam>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    #[default]
    FullState,
    PositionsOnly,
}

impl LossTarget {
    fn components(self, state_dim: usize, position_dim: usize) -> usize {
        match self {
            LossTarget::FullState => state_dim,
            LossTarget::PositionsOnly => position_dim,
        }
    }
}

pub fn solution_sensitivity(
    spec: &GameSpec,
    theta: &ThetaParams,
    z_star: &SolveResult,
) -> Result<SensitivityResult> {
    let system = KktSystem::new(spec, theta, z_star.layout.mode)?;
    if *system.layout() != z_star.layout {
        return Err(Error::Precondition("solution layout does not match the game".into()));
    }
    let residual = system.residual(&z_star.z)?.amax();
    if !(residual <= CONVERGENCE_REQUIREMENT) {
        return Err(Error::Precondition(format!(
            "sensitivity needs a converged solution (residual {residual:.3e})"
        )));
    }
    let f_theta = system.theta_jacobian(&z_star.z)?;
    let jac = system.jacobian_dense(&z_star.z)?;
    let rhs = -&f_theta;
    let lu = DenseLu::new(&jac)?;
    let conditioning = lu.min_pivot();
    if f_theta.ncols() == 0 {
        return Ok(SensitivityResult {
            dz_dtheta: DMatrix::zeros(jac.nrows(), 0),
            conditioning,
            method: SensitivityMethod::Direct,
            params: theta.learnable.clone(),
        });
    }
    if lu.pivot_ratio() >= PIVOT_RATIO_THRESHOLD {
        let dz = lu.solve(&rhs);
        if dz.iter().all(|v| v.is_finite()) {
            return Ok(SensitivityResult {
                dz_dtheta: dz,
                conditioning,
                method: SensitivityMethod::Direct,
                params: theta.learnable.clone(),
            });
        }
    }
    let dz = min_norm_least_squares(&jac, &rhs, 1e-12)?;
    if dz.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares sensitivity"));
    }
    Ok(SensitivityResult {
        dz_dtheta: dz,
        conditioning,
        method: SensitivityMethod::LeastSquares,
        params: theta.learnable.clone(),
    })
}

/// `‖(∂F/∂z)(∂z*/∂θ) + ∂F/∂θ‖_∞`.
pub fn implicit_residual(
    spec: &GameSpec,
    theta: &ThetaParams,
    z_star: &SolveResult,
    sens: &SensitivityResult,
) -> Result<f64> {
    let system = KktSystem::new(spec, theta, z_star.layout.mode)?;
    let jac = system.jacobian_dense(&z_star.z)?;
    let f_theta = system.theta_jacobian(&z_star.z)?;
    Ok((jac * &sens.dz_dtheta + f_theta).amax())
}

/// `ℓ = ‖x − x̃‖²` over every robot and step.
pub fn trajectory_loss(
    spec: &GameSpec,
    traj: &Trajectory,
    expert: &Trajectory,
    target: LossTarget,
) -> Result<f64> {
    traj.check_shape(spec)?;
    expert.check_shape(spec)?;
    let s = spec.state_dim();
    let comps = target.components(s, spec.position_dim());
    let mut loss = 0.0;
    for t in 0..spec.horizon() {
        for i in 0..spec.num_robots() {
            for r in 0..comps {
                let d = traj.states()[(t, i * s + r)] - expert.states()[(t, i * s + r)];
                loss += d * d;
            }
        }
    }
    Ok(loss)
}

/// `∇_θ ℓ = 2 (x − x̃)ᵀ ∂x*/∂θ`. The initial state is data, so only steps
/// `t ≥ 1` contribute.
pub fn loss_gradient(
    spec: &GameSpec,
    z_star: &SolveResult,
    sens: &SensitivityResult,
    expert: &Trajectory,
    target: LossTarget,
) -> Result<DVector<f64>> {
    expert.check_shape(spec)?;
    let layout = &z_star.layout;
    let comps = target.components(layout.state_dim, layout.position_dim);
    let s = layout.state_dim;
    let mut grad = DVector::zeros(sens.dz_dtheta.ncols());
    for (slot, &robot) in layout.players.iter().enumerate() {
        for t in 1..layout.horizon {
            let x = layout.x_index(slot, t);
            for r in 0..comps {
                let diff = z_star.z[x + r] - expert.states()[(t, robot * s + r)];
                if diff == 0.0 {
                    continue;
                }
                for p in 0..grad.len() {
                    grad[p] += 2.0 * diff * sens.dz_dtheta[(x + r, p)];
                }
            }
        }
    }
    Ok(grad)
}
