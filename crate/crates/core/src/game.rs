//! The parametric collision-avoidance game: robots, horizon, objectives,
//! thrust limits and rotating-hyperplane constraints.
//!
//! Time indices in code are zero-based: `t = 0` is the fixed initial state,
//! and hyperplane constraints apply to `t = 1..T`. The hyperplane normal at
//! step `t` points at angle `α + ω·t`.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearDynamics;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    Planar,
    Full3d,
}

impl SpatialMode {
    pub fn position_dim(self) -> usize {
        match self {
            SpatialMode::Planar => 2,
            SpatialMode::Full3d => 3,
        }
    }
}

/// Ordered pair `(i, j)`: robot `i` stays on the far side of a hyperplane
/// tangent to the keep-out zone centred on robot `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RobotPair {
    pub i: usize,
    pub j: usize,
}

impl RobotPair {
    pub fn new(i: usize, j: usize) -> Self {
        RobotPair { i, j }
    }

    pub fn involves(&self, robot: usize) -> bool {
        self.i == robot || self.j == robot
    }
}

/// Every unordered pair `(i, j)` with `i < j`.
pub fn all_pairs(num_robots: usize) -> Vec<RobotPair> {
    let mut pairs = Vec::new();
    for i in 0..num_robots {
        for j in i + 1..num_robots {
            pairs.push(RobotPair::new(i, j));
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    num_robots: usize,
    horizon: usize,
    dt: f64,
    dynamics: LinearDynamics,
    /// Stacked `[x^1_1; ...; x^N_1]`.
    initial_state: DVector<f64>,
    /// One row per robot, `position_dim` columns.
    goals: DMatrix<f64>,
    control_weights: Vec<f64>,
    thrust_limit: f64,
    pairs: Vec<RobotPair>,
}

impl GameSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dynamics: LinearDynamics,
        horizon: usize,
        dt: f64,
        initial_state: DVector<f64>,
        goals: DMatrix<f64>,
        control_weights: Vec<f64>,
        thrust_limit: f64,
        pairs: Vec<RobotPair>,
    ) -> Result<Self> {
        let n = goals.nrows();
        if n == 0 {
            return Err(Error::Config("a game needs at least one robot".into()));
        }
        if horizon < 2 {
            return Err(Error::Config(format!("horizon must be at least 2, got {horizon}")));
        }
        if goals.ncols() != dynamics.position_dim() {
            return Err(Error::Dimension {
                what: "goal width",
                expected: dynamics.position_dim(),
                got: goals.ncols(),
            });
        }
        if initial_state.len() != n * dynamics.state_dim() {
            return Err(Error::Dimension {
                what: "stacked initial state",
                expected: n * dynamics.state_dim(),
                got: initial_state.len(),
            });
        }
        if control_weights.len() != n {
            return Err(Error::Dimension {
                what: "control weights",
                expected: n,
                got: control_weights.len(),
            });
        }
        if control_weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::Config("control weights must be finite and >= 0".into()));
        }
        if !(thrust_limit.is_finite() && thrust_limit > 0.0) {
            return Err(Error::Config(format!("thrust limit must be positive, got {thrust_limit}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        for (k, p) in pairs.iter().enumerate() {
            if p.i == p.j || p.i >= n || p.j >= n {
                return Err(Error::Config(format!(
                    "pair {k} = ({}, {}) must name two distinct robots below {n}",
                    p.i, p.j
                )));
            }
            if pairs[..k].contains(p) {
                return Err(Error::Config(format!("pair ({}, {}) listed twice", p.i, p.j)));
            }
        }
        if !pairs.is_empty() && dynamics.position_dim() < 2 {
            return Err(Error::Config("hyperplane constraints need planar positions".into()));
        }
        if initial_state.iter().chain(goals.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state or goals"));
        }
        Ok(GameSpec {
            num_robots: n,
            horizon,
            dt,
            dynamics,
            initial_state,
            goals,
            control_weights,
            thrust_limit,
            pairs,
        })
    }

    pub fn num_robots(&self) -> usize {
        self.num_robots
    }

    /// Number of time steps `T` (states `x_1..x_T`).
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dynamics(&self) -> &LinearDynamics {
        &self.dynamics
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn position_dim(&self) -> usize {
        self.dynamics.position_dim()
    }

    pub fn spatial_mode(&self) -> Option<SpatialMode> {
        match self.position_dim() {
            2 => Some(SpatialMode::Planar),
            3 => Some(SpatialMode::Full3d),
            _ => None,
        }
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial_state
    }

    pub fn initial_robot_state(&self, robot: usize) -> DVectorView<'_, f64> {
        let s = self.state_dim();
        self.initial_state.rows(robot * s, s)
    }

    pub fn goal(&self, robot: usize) -> DVector<f64> {
        self.goals.row(robot).transpose()
    }

    pub fn goals(&self) -> &DMatrix<f64> {
        &self.goals
    }

    pub fn control_weights(&self) -> &[f64] {
        &self.control_weights
    }

    pub fn thrust_limit(&self) -> f64 {
        self.thrust_limit
    }

    pub fn pairs(&self) -> &[RobotPair] {
        &self.pairs
    }

    /// `Ω^i`: indices of the pairs that involve `robot`.
    pub fn pairs_of(&self, robot: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.involves(robot))
            .map(|(k, _)| k)
    }

    /// Same game with a different initial state.
    pub fn with_initial_state(&self, initial_state: DVector<f64>) -> Result<GameSpec> {
        GameSpec::new(
            self.dynamics.clone(),
            self.horizon,
            self.dt,
            initial_state,
            self.goals.clone(),
            self.control_weights.clone(),
            self.thrust_limit,
            self.pairs.clone(),
        )
    }

    /// Same game with a different pair set.
    pub fn with_pairs(&self, pairs: Vec<RobotPair>) -> Result<GameSpec> {
        GameSpec::new(
            self.dynamics.clone(),
            self.horizon,
            self.dt,
            self.initial_state.clone(),
            self.goals.clone(),
            self.control_weights.clone(),
            self.thrust_limit,
            pairs,
        )
    }

    /// Planar position of `robot` in the initial state.
    pub fn initial_planar_position(&self, robot: usize) -> [f64; 2] {
        let x = self.initial_robot_state(robot);
        [x[0], x[1]]
    }

    /// Reference angles `α` for every pair, from the initial state.
    pub fn alphas(&self) -> Result<Vec<f64>> {
        self.pairs
            .iter()
            .map(|&pair| alpha_from_initial_state(self, pair))
            .collect()
    }
}

/// Hyperplane parameters of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    /// Rotation rate ω, rad per time step (quoted in rad/s with Δt folded in
    /// by the step index, matching the angle `α + ω·t`).
    pub omega: f64,
    /// Keep-out radius ρ, m.
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Omega,
    Rho,
    Xi,
}

/// One learnable coordinate of θ. `targets` are pair indices (for ω, ρ) or
/// robot indices (for ξ); several targets tie them to one value.
///
/// Internally ρ and ξ are learned as logarithms so they stay positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnableParam {
    pub kind: ParamKind,
    pub targets: Vec<usize>,
}

impl LearnableParam {
    pub fn omega(pair: usize) -> Self {
        LearnableParam {
            kind: ParamKind::Omega,
            targets: vec![pair],
        }
    }

    pub fn rho(pair: usize) -> Self {
        LearnableParam {
            kind: ParamKind::Rho,
            targets: vec![pair],
        }
    }

    pub fn xi(robot: usize) -> Self {
        LearnableParam {
            kind: ParamKind::Xi,
            targets: vec![robot],
        }
    }

    pub fn label(&self) -> String {
        let name = match self.kind {
            ParamKind::Omega => "omega",
            ParamKind::Rho => "rho",
            ParamKind::Xi => "xi",
        };
        let ids: Vec<String> = self.targets.iter().map(|t| t.to_string()).collect();
        format!("{name}_{}", ids.join("_"))
    }
}

/// θ = {ω, ρ, ξ} plus the mask of learnable entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    /// Aligned with the spec's pair list.
    pub pairs: Vec<PairParams>,
    /// Per-robot ξ override; `None` uses the spec's control weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub learnable: Vec<LearnableParam>,
}

impl ThetaParams {
    /// Same (ω, ρ) for every pair; ω and ρ of each pair learnable.
    pub fn uniform(num_pairs: usize, omega: f64, rho: f64) -> Self {
        let mut learnable = Vec::with_capacity(2 * num_pairs);
        for k in 0..num_pairs {
            learnable.push(LearnableParam::omega(k));
            learnable.push(LearnableParam::rho(k));
        }
        ThetaParams {
            pairs: vec![PairParams { omega, rho }; num_pairs],
            control_weights: None,
            learnable,
        }
    }

    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        if self.pairs.len() != spec.pairs().len() {
            return Err(Error::Dimension {
                what: "hyperplane parameters per pair",
                expected: spec.pairs().len(),
                got: self.pairs.len(),
            });
        }
        for (k, p) in self.pairs.iter().enumerate() {
            if !(p.rho.is_finite() && p.rho > 0.0) {
                return Err(Error::Domain(format!("pair {k}: rho must be positive, got {}", p.rho)));
            }
            if !p.omega.is_finite() {
                return Err(Error::NonFinite("omega"));
            }
        }
        if let Some(w) = &self.control_weights {
            if w.len() != spec.num_robots() {
                return Err(Error::Dimension {
                    what: "control weight override",
                    expected: spec.num_robots(),
                    got: w.len(),
                });
            }
            if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::Domain("control weights must be >= 0".into()));
            }
        }
        for param in &self.learnable {
            let limit = match param.kind {
                ParamKind::Omega | ParamKind::Rho => spec.pairs().len(),
                ParamKind::Xi => spec.num_robots(),
            };
            if param.targets.is_empty() || param.targets.iter().any(|&t| t >= limit) {
                return Err(Error::Config(format!(
                    "learnable parameter {} has invalid targets",
                    param.label()
                )));
            }
            let values: Vec<f64> = param
                .targets
                .iter()
                .map(|&t| self.natural_value(spec, param.kind, t))
                .collect();
            if values.iter().any(|&v| v != values[0]) {
                return Err(Error::Config(format!(
                    "tied parameter {} has unequal target values",
                    param.label()
                )));
            }
            if param.kind == ParamKind::Xi && values[0] <= 0.0 {
                return Err(Error::Domain("a learnable control weight must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn control_weight(&self, spec: &GameSpec, robot: usize) -> f64 {
        match &self.control_weights {
            Some(w) => w[robot],
            None => spec.control_weights()[robot],
        }
    }

    fn natural_value(&self, spec: &GameSpec, kind: ParamKind, target: usize) -> f64 {
        match kind {
            ParamKind::Omega => self.pairs[target].omega,
            ParamKind::Rho => self.pairs[target].rho,
            ParamKind::Xi => self.control_weight(spec, target),
        }
    }

    /// Learnable entries in natural units (ω rad/s, ρ m, ξ).
    pub fn natural_vector(&self, spec: &GameSpec) -> Vec<f64> {
        self.learnable
            .iter()
            .map(|p| self.natural_value(spec, p.kind, p.targets[0]))
            .collect()
    }

    /// Learnable entries in learning coordinates (ω, ln ρ, ln ξ).
    pub fn internal_vector(&self, spec: &GameSpec) -> Vec<f64> {
        self.learnable
            .iter()
            .zip(self.natural_vector(spec))
            .map(|(p, v)| to_internal(p.kind, v))
            .collect()
    }

    /// Writes learning coordinates back to every tied target.
    pub fn set_internal(&mut self, spec: &GameSpec, values: &[f64]) -> Result<()> {
        if values.len() != self.learnable.len() {
            return Err(Error::Dimension {
                what: "learnable parameter vector",
                expected: self.learnable.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update"));
        }
        let learnable = self.learnable.clone();
        for (param, &value) in learnable.iter().zip(values) {
            let natural = to_natural(param.kind, value);
            for &t in &param.targets {
                match param.kind {
                    ParamKind::Omega => self.pairs[t].omega = natural,
                    ParamKind::Rho => self.pairs[t].rho = natural,
                    ParamKind::Xi => {
                        let weights = self
                            .control_weights
                            .get_or_insert_with(|| spec.control_weights().to_vec());
                        weights[t] = natural;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn to_internal(kind: ParamKind, natural: f64) -> f64 {
    match kind {
        ParamKind::Omega => natural,
        ParamKind::Rho | ParamKind::Xi => natural.ln(),
    }
}

pub fn to_natural(kind: ParamKind, internal: f64) -> f64 {
    match kind {
        ParamKind::Omega => internal,
        ParamKind::Rho | ParamKind::Xi => internal.exp(),
    }
}

/// Stacked states and controls for all robots, one time step per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    num_robots: usize,
    state_dim: usize,
    control_dim: usize,
    /// `T × (N·state_dim)`
    states: DMatrix<f64>,
    /// `(T-1) × (N·control_dim)`
    controls: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(
        num_robots: usize,
        state_dim: usize,
        control_dim: usize,
        states: DMatrix<f64>,
        controls: DMatrix<f64>,
    ) -> Result<Self> {
        if states.ncols() != num_robots * state_dim {
            return Err(Error::Dimension {
                what: "trajectory state width",
                expected: num_robots * state_dim,
                got: states.ncols(),
            });
        }
        if controls.ncols() != num_robots * control_dim {
            return Err(Error::Dimension {
                what: "trajectory control width",
                expected: num_robots * control_dim,
                got: controls.ncols(),
            });
        }
        if states.nrows() < 1 || controls.nrows() + 1 != states.nrows() {
            return Err(Error::Dimension {
                what: "control steps (T-1)",
                expected: states.nrows().saturating_sub(1),
                got: controls.nrows(),
            });
        }
        Ok(Trajectory {
            num_robots,
            state_dim,
            control_dim,
            states,
            controls,
        })
    }

    /// Zero-filled trajectory shaped for `spec`.
    pub fn zeros(spec: &GameSpec) -> Self {
        let n = spec.num_robots();
        let t = spec.horizon();
        Trajectory {
            num_robots: n,
            state_dim: spec.state_dim(),
            control_dim: spec.control_dim(),
            states: DMatrix::zeros(t, n * spec.state_dim()),
            controls: DMatrix::zeros(t - 1, n * spec.control_dim()),
        }
    }

    /// Rolls every robot forward from the spec's initial state.
    pub fn from_controls(spec: &GameSpec, controls: DMatrix<f64>) -> Result<Self> {
        let n = spec.num_robots();
        let (s, c) = (spec.state_dim(), spec.control_dim());
        if controls.nrows() + 1 != spec.horizon() || controls.ncols() != n * c {
            return Err(Error::Dimension {
                what: "control sequence",
                expected: (spec.horizon() - 1) * n * c,
                got: controls.len(),
            });
        }
        let mut states = DMatrix::zeros(spec.horizon(), n * s);
        for i in 0..n {
            let x1 = spec.initial_robot_state(i).into_owned();
            let u = controls.columns(i * c, c).into_owned();
            let xi = crate::dynamics::propagate(spec.dynamics(), &x1, &u)?;
            states.columns_mut(i * s, s).copy_from(&xi);
        }
        Trajectory::new(n, s, c, states, controls)
    }

    pub fn num_robots(&self) -> usize {
        self.num_robots
    }

    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.states
    }

    pub fn controls(&self) -> &DMatrix<f64> {
        &self.controls
    }

    pub fn controls_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.controls
    }

    /// `x^i_t`
    pub fn state(&self, t: usize, robot: usize) -> DVector<f64> {
        let base = robot * self.state_dim;
        DVector::from_fn(self.state_dim, |r, _| self.states[(t, base + r)])
    }

    /// `u^i_t`
    pub fn control(&self, t: usize, robot: usize) -> DVector<f64> {
        let base = robot * self.control_dim;
        DVector::from_fn(self.control_dim, |r, _| self.controls[(t, base + r)])
    }

    /// Planar position `(x, y)` of `robot` at `t`.
    pub fn planar_position(&self, t: usize, robot: usize) -> [f64; 2] {
        let c = robot * self.state_dim;
        [self.states[(t, c)], self.states[(t, c + 1)]]
    }

    pub fn position(&self, t: usize, robot: usize) -> DVector<f64> {
        let p = self.state_dim / 2;
        let base = robot * self.state_dim;
        DVector::from_fn(p, |r, _| self.states[(t, base + r)])
    }

    /// `x_t`: all robots at one step.
    pub fn joint_state(&self, t: usize) -> DVector<f64> {
        self.states.row(t).transpose()
    }

    /// `x^i`: `T × state_dim` block of one robot.
    pub fn robot_states(&self, robot: usize) -> DMatrix<f64> {
        self.states
            .columns(robot * self.state_dim, self.state_dim)
            .into_owned()
    }

    /// `u^i`: `(T-1) × control_dim` block of one robot.
    pub fn robot_controls(&self, robot: usize) -> DMatrix<f64> {
        self.controls
            .columns(robot * self.control_dim, self.control_dim)
            .into_owned()
    }

    /// `x^{-i}`: every robot but `robot`, in robot order.
    pub fn other_states(&self, robot: usize) -> DMatrix<f64> {
        let s = self.state_dim;
        let keep: Vec<usize> = (0..self.num_robots * s)
            .filter(|c| c / s != robot)
            .collect();
        self.states.select_columns(keep.iter())
    }

    /// Inverse of [`Trajectory::robot_states`] over all robots.
    pub fn from_robot_blocks(
        blocks: &[DMatrix<f64>],
        controls: &[DMatrix<f64>],
    ) -> Result<Trajectory> {
        let n = blocks.len();
        if n == 0 || controls.len() != n {
            return Err(Error::Dimension {
                what: "robot blocks",
                expected: n,
                got: controls.len(),
            });
        }
        let (t, s) = (blocks[0].nrows(), blocks[0].ncols());
        let c = controls[0].ncols();
        let mut states = DMatrix::zeros(t, n * s);
        let mut ctrl = DMatrix::zeros(t.saturating_sub(1), n * c);
        for i in 0..n {
            if blocks[i].shape() != (t, s) || controls[i].shape() != (t - 1, c) {
                return Err(Error::Dimension {
                    what: "robot block shape",
                    expected: t * s,
                    got: blocks[i].len(),
                });
            }
            states.columns_mut(i * s, s).copy_from(&blocks[i]);
            ctrl.columns_mut(i * c, c).copy_from(&controls[i]);
        }
        Trajectory::new(n, s, c, states, ctrl)
    }

    pub fn check_shape(&self, spec: &GameSpec) -> Result<()> {
        if self.num_robots != spec.num_robots()
            || self.state_dim != spec.state_dim()
            || self.control_dim != spec.control_dim()
            || self.horizon() != spec.horizon()
        {
            return Err(Error::Dimension {
                what: "trajectory shape (robots × horizon × state)",
                expected: spec.num_robots() * spec.horizon() * spec.state_dim(),
                got: self.num_robots * self.horizon() * self.state_dim,
            });
        }
        Ok(())
    }
}

/// `α`: angle between the x-axis and `p^i_1 - p^j_1`.
pub fn alpha_from_initial_state(spec: &GameSpec, pair: RobotPair) -> Result<f64> {
    let pi = spec.initial_planar_position(pair.i);
    let pj = spec.initial_planar_position(pair.j);
    let (dx, dy) = (pi[0] - pj[0], pi[1] - pj[1]);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "robots {} and {} start at the same planar position",
            pair.i, pair.j
        )));
    }
    Ok(dy.atan2(dx))
}

/// Unit normal `[cos(α + ω t), sin(α + ω t)]`.
#[inline]
pub fn hyperplane_normal(alpha: f64, omega: f64, t: usize) -> [f64; 2] {
    let (s, c) = (alpha + omega * t as f64).sin_cos();
    [c, s]
}

/// `H_t = n_tᵀ (p^i_t - m_t)` with `m_t = p^j_t + ρ n_t`.
#[inline]
pub fn hyperplane_value(
    alpha: f64,
    params: PairParams,
    t: usize,
    p_i: [f64; 2],
    p_j: [f64; 2],
) -> f64 {
    let n = hyperplane_normal(alpha, params.omega, t);
    let m = [p_j[0] + params.rho * n[0], p_j[1] + params.rho * n[1]];
    n[0] * (p_i[0] - m[0]) + n[1] * (p_i[1] - m[1])
}

/// Normals and tangent points of one pair's hyperplane along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneGeometry {
    pub pair: RobotPair,
    pub alpha: f64,
    pub normals: Vec<[f64; 2]>,
    pub tangent_points: Vec<[f64; 2]>,
    /// `H_t` for `t = 0..T`; the entry at `t = 0` is informational only.
    pub values: Vec<f64>,
}

pub fn hyperplane_geometry(
    spec: &GameSpec,
    theta: &ThetaParams,
    pair_index: usize,
    traj: &Trajectory,
) -> Result<HyperplaneGeometry> {
    let pair = spec.pairs()[pair_index];
    let alpha = alpha_from_initial_state(spec, pair)?;
    let params = theta.pairs[pair_index];
    let mut normals = Vec::with_capacity(traj.horizon());
    let mut tangent_points = Vec::with_capacity(traj.horizon());
    let mut values = Vec::with_capacity(traj.horizon());
    for t in 0..traj.horizon() {
        let n = hyperplane_normal(alpha, params.omega, t);
        let pj = traj.planar_position(t, pair.j);
        normals.push(n);
        tangent_points.push([pj[0] + params.rho * n[0], pj[1] + params.rho * n[1]]);
        values.push(hyperplane_value(
            alpha,
            params,
            t,
            traj.planar_position(t, pair.i),
            pj,
        ));
    }
    Ok(HyperplaneGeometry {
        pair,
        alpha,
        normals,
        tangent_points,
        values,
    })
}

/// `J^i = ‖p^i_T - p^i_goal‖² + ξ^i ‖u^i‖²`.
pub fn objective_value(spec: &GameSpec, theta: &ThetaParams, traj: &Trajectory, robot: usize) -> f64 {
    let last = traj.horizon() - 1;
    let terminal = (traj.position(last, robot) - spec.goal(robot)).norm_squared();
    let effort: f64 = (0..traj.horizon() - 1)
        .map(|t| traj.control(t, robot).norm_squared())
        .sum();
    terminal + theta.control_weight(spec, robot) * effort
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `min_t H_t` per pair over `t = 1..T`.
    pub min_hyperplane: Vec<f64>,
    pub min_pair_distance: f64,
    pub max_abs_control: f64,
    pub thrust_limit: f64,
    /// `max_t ‖x_{t+1} - A x_t - B u_t‖_∞` over all robots.
    pub max_dynamics_residual: f64,
}

impl FeasibilityReport {
    pub fn min_hyperplane_overall(&self) -> f64 {
        self.min_hyperplane.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn thrust_excess(&self) -> f64 {
        (self.max_abs_control - self.thrust_limit).max(0.0)
    }

    pub fn is_feasible(&self, hyperplane_tol: f64, thrust_tol: f64, dynamics_tol: f64) -> bool {
        self.min_hyperplane_overall() >= -hyperplane_tol
            && self.max_abs_control <= self.thrust_limit + thrust_tol
            && self.max_dynamics_residual <= dynamics_tol
    }

    /// The certificate thresholds used for converged solves.
    pub fn passes_certificate(&self) -> bool {
        self.is_feasible(1e-6, 1e-8, 1e-8)
    }
}

pub fn feasibility_report(
    spec: &GameSpec,
    theta: &ThetaParams,
    traj: &Trajectory,
) -> Result<FeasibilityReport> {
    traj.check_shape(spec)?;
    let alphas = spec.alphas()?;
    let horizon = traj.horizon();

    let min_hyperplane = spec
        .pairs()
        .iter()
        .enumerate()
        .map(|(k, pair)| {
            (1..horizon)
                .map(|t| {
                    hyperplane_value(
                        alphas[k],
                        theta.pairs[k],
                        t,
                        traj.planar_position(t, pair.i),
                        traj.planar_position(t, pair.j),
                    )
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let mut min_pair_distance = f64::INFINITY;
    for i in 0..spec.num_robots() {
        for j in i + 1..spec.num_robots() {
            for t in 0..horizon {
                let (a, b) = (traj.planar_position(t, i), traj.planar_position(t, j));
                let d = (a[0] - b[0]).hypot(a[1] - b[1]);
                min_pair_distance = min_pair_distance.min(d);
            }
        }
    }

    let max_abs_control = traj.controls().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut max_dynamics_residual = 0.0f64;
    for i in 0..spec.num_robots() {
        for t in 0..horizon - 1 {
            let pred = spec.dynamics().step(&traj.state(t, i), &traj.control(t, i));
            let r = (traj.state(t + 1, i) - pred).amax();
            max_dynamics_residual = max_dynamics_residual.max(r);
        }
    }

    Ok(FeasibilityReport {
        min_hyperplane,
        min_pair_distance,
        max_abs_control,
        thrust_limit: spec.thrust_limit(),
        max_dynamics_residual,
    })
}

/// Fails when a pair starts inside its own keep-out radius.
pub fn check_initial_separation(spec: &GameSpec, theta: &ThetaParams) -> Result<()> {
    for (k, pair) in spec.pairs().iter().enumerate() {
        let a = spec.initial_planar_position(pair.i);
        let b = spec.initial_planar_position(pair.j);
        let separation = (a[0] - b[0]).hypot(a[1] - b[1]);
        let radius = theta.pairs[k].rho;
        if separation <= radius {
            return Err(Error::InfeasibleGeometry {
                i: pair.i,
                j: pair.j,
                separation,
                radius,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{hcw_from_mean_motion, planar_from_full};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn two_robot_spec(p1: [f64; 2], p2: [f64; 2], horizon: usize) -> GameSpec {
        let dynamics = planar_from_full(&hcw_from_mean_motion(1.1e-3, 5.0, 100.0).unwrap()).unwrap();
        GameSpec::new(
            dynamics,
            horizon,
            5.0,
            DVector::from_vec(vec![p1[0], p1[1], 0.0, 0.0, p2[0], p2[1], 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, -100.0, 100.0, 0.0]),
            vec![1e-4, 1e-4],
            1.0,
            vec![RobotPair::new(0, 1)],
        )
        .unwrap()
    }

    #[test]
    fn alpha_of_table_geometry() {
        let spec = two_robot_spec([0.0, 100.0], [-100.0, 0.0], 44);
        let a = alpha_from_initial_state(&spec, RobotPair::new(0, 1)).unwrap();
        assert_relative_eq!(a, FRAC_PI_4, epsilon = 1e-15);
    }

    #[test]
    fn alpha_along_axes() {
        let spec = two_robot_spec([5.0, 0.0], [0.0, 0.0], 3);
        assert_eq!(alpha_from_initial_state(&spec, RobotPair::new(0, 1)).unwrap(), 0.0);
        let spec = two_robot_spec([0.0, 5.0], [0.0, 0.0], 3);
        assert_eq!(
            alpha_from_initial_state(&spec, RobotPair::new(0, 1)).unwrap(),
            FRAC_PI_2
        );
    }

    #[test]
    fn coincident_start_is_degenerate() {
        let spec = two_robot_spec([1.0, 1.0], [1.0, 1.0], 3);
        assert!(matches!(
            alpha_from_initial_state(&spec, RobotPair::new(0, 1)),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn hyperplane_simple_values() {
        let zero = PairParams { omega: 0.0, rho: 0.0 };
        assert_eq!(hyperplane_value(0.0, zero, 3, [7.5, 0.0], [0.0, 0.0]), 7.5);

        let params = PairParams { omega: 0.03, rho: 12.0 };
        let alpha = 0.4;
        let t = 5;
        let n = hyperplane_normal(alpha, params.omega, t);
        let pj = [3.0, -2.0];
        let pi = [pj[0] + params.rho * n[0], pj[1] + params.rho * n[1]];
        assert!(hyperplane_value(alpha, params, t, pi, pj).abs() < 1e-13);
    }

    #[test]
    fn objective_values() {
        let spec = two_robot_spec([0.0, 100.0], [-100.0, 0.0], 4);
        let theta = ThetaParams::uniform(1, 0.015, 30.0);
        let mut traj = Trajectory::zeros(&spec);
        // Robot 0 ends at its goal with no thrust.
        traj.states_mut()[(3, 0)] = 0.0;
        traj.states_mut()[(3, 1)] = -100.0;
        assert_eq!(objective_value(&spec, &theta, &traj, 0), 0.0);
        // Robot 1 ends (3, 4) away from its goal.
        traj.states_mut()[(3, 4)] = 103.0;
        traj.states_mut()[(3, 5)] = 4.0;
        assert_relative_eq!(objective_value(&spec, &theta, &traj, 1), 25.0, epsilon = 1e-12);
        traj.controls_mut()[(0, 2)] = 2.0;
        assert_relative_eq!(
            objective_value(&spec, &theta, &traj, 1),
            25.0 + 1e-4 * 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn stacking_counts() {
        let spec = two_robot_spec([0.0, 100.0], [-100.0, 0.0], 44);
        let traj = Trajectory::zeros(&spec);
        let geo = hyperplane_geometry(&spec, &ThetaParams::uniform(1, 0.015, 30.0), 0, &traj).unwrap();
        // constraints live on t = 1..T
        assert_eq!(geo.values[1..].len(), spec.horizon() - 1);
        assert_eq!(spec.pairs_of(0).count() * (spec.horizon() - 1), 43);
    }

    #[test]
    fn far_apart_stationary_short_horizon_is_feasible() {
        let spec = two_robot_spec([0.0, 500.0], [0.0, -500.0], 2);
        let theta = ThetaParams::uniform(1, 0.0, 30.0);
        let traj = Trajectory::from_controls(&spec, DMatrix::zeros(1, 4)).unwrap();
        let report = feasibility_report(&spec, &theta, &traj).unwrap();
        assert!(report.min_hyperplane_overall() > 0.0);
        assert!(report.passes_certificate());
    }

    #[test]
    fn crossing_trajectory_violates_hyperplane() {
        let spec = two_robot_spec([0.0, 100.0], [-100.0, 0.0], 11);
        let theta = ThetaParams::uniform(1, 0.015, 30.0);
        // Straight lines through the origin, meeting at t = 5.
        let mut traj = Trajectory::zeros(&spec);
        for t in 0..11 {
            let f = t as f64 / 10.0;
            let s = traj.states_mut();
            s[(t, 0)] = 0.0;
            s[(t, 1)] = 100.0 - 200.0 * f;
            s[(t, 4)] = -100.0 + 200.0 * f;
            s[(t, 5)] = 0.0;
        }
        let report = feasibility_report(&spec, &theta, &traj).unwrap();
        assert!(report.min_hyperplane[0] < 0.0);
        assert!(report.min_pair_distance < 1e-9);
        assert!(!report.passes_certificate());
    }

    #[test]
    fn slicing_round_trip() {
        let spec = two_robot_spec([0.0, 100.0], [-100.0, 0.0], 5);
        let controls = DMatrix::from_fn(4, 4, |r, c| (r as f64 + 1.0) * 0.1 - c as f64 * 0.05);
        let traj = Trajectory::from_controls(&spec, controls).unwrap();
        let blocks: Vec<_> = (0..2).map(|i| traj.robot_states(i)).collect();
        let ctrl: Vec<_> = (0..2).map(|i| traj.robot_controls(i)).collect();
        let back = Trajectory::from_robot_blocks(&blocks, &ctrl).unwrap();
        assert_eq!(back, traj);
        assert_eq!(traj.other_states(0), traj.robot_states(1));
        assert_eq!(traj.joint_state(2).rows(4, 4), traj.state(2, 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let dynamics = planar_from_full(&hcw_from_mean_motion(1.1e-3, 5.0, 100.0).unwrap()).unwrap();
        let x1 = DVector::zeros(8);
        let goals = DMatrix::zeros(2, 2);
        let make = |horizon, pairs: Vec<RobotPair>| {
            GameSpec::new(
                dynamics.clone(),
                horizon,
                5.0,
                x1.clone(),
                goals.clone(),
                vec![1e-4; 2],
                1.0,
                pairs,
            )
        };
        assert!(make(1, vec![]).is_err());
        assert!(make(5, vec![RobotPair::new(0, 0)]).is_err());
        assert!(make(5, vec![RobotPair::new(0, 2)]).is_err());
        assert!(make(5, vec![RobotPair::new(0, 1), RobotPair::new(0, 1)]).is_err());
        assert!(make(5, vec![RobotPair::new(1, 0)]).is_ok());
    }

    #[test]
    fn initial_separation_check() {
        let spec = two_robot_spec([0.0, 10.0], [0.0, 0.0], 5);
        assert!(check_initial_separation(&spec, &ThetaParams::uniform(1, 0.0, 9.0)).is_ok());
        assert!(matches!(
            check_initial_separation(&spec, &ThetaParams::uniform(1, 0.0, 10.5)),
            Err(Error::InfeasibleGeometry { .. })
        ));
    }

    #[test]
    fn internal_round_trip() {
        let spec = two_robot_spec([0.0, 100.0], [-100.0, 0.0], 5);
        let mut theta = ThetaParams::uniform(1, 0.008, 10.0);
        theta.learnable.push(LearnableParam::xi(1));
        let internal = theta.internal_vector(&spec);
        let mut copy = theta.clone();
        copy.set_internal(&spec, &internal).unwrap();
        let (a, b) = (theta.natural_vector(&spec), copy.natural_vector(&spec));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn normals_are_unit_and_rotate_by_omega(alpha in -10.0..10.0f64, omega in -1.0..1.0f64, t in 0usize..500) {
            let n = hyperplane_normal(alpha, omega, t);
            prop_assert!(((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() <= 1e-12);
            let next = hyperplane_normal(alpha, omega, t + 1);
            // angle between consecutive normals equals omega (mod 2π)
            let cross = n[0] * next[1] - n[1] * next[0];
            let dot = n[0] * next[0] + n[1] * next[1];
            let delta = cross.atan2(dot);
            let wrapped = (omega + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            prop_assert!((delta - wrapped).abs() < 1e-9);
        }

        #[test]
        fn nonnegative_hyperplane_implies_separation(
            alpha in -3.2..3.2f64,
            omega in -0.1..0.1f64,
            rho in 0.1..50.0f64,
            t in 1usize..60,
            pi in prop::array::uniform2(-200.0..200.0f64),
            pj in prop::array::uniform2(-200.0..200.0f64),
        ) {
            let params = PairParams { omega, rho };
            let h = hyperplane_value(alpha, params, t, pi, pj);
            if h >= 0.0 {
                let d = (pi[0] - pj[0]).hypot(pi[1] - pj[1]);
                prop_assert!(d >= rho - 1e-9);
            }
        }
    }
}
