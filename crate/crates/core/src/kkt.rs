//! Stacked first-order equilibrium conditions `F(z; θ) = 0`.
//!
//! Unknowns are laid out block by block as `[x, u, w, v, λ_hi, λ_lo]`, and
//! the residual rows follow the same layout: the row range of the `x` block
//! holds the state stationarity conditions, `u` the control stationarity
//! conditions, `w` the dynamics equalities, and the multiplier blocks hold
//! the Fischer–Burmeister values of their complementarity pairs.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    alpha_from_initial_state, hyperplane_normal, hyperplane_value, GameSpec, ParamKind, RobotPair,
    ThetaParams, Trajectory,
};
use crate::linalg::Triplets;

/// Smoothing inside the Fischer–Burmeister root, used only when both
/// arguments are this close (squared) to the origin.
pub const FB_EPSILON: f64 = 1e-10;

/// `φ(a, b) = a + b − √(a² + b²)`.
#[inline]
pub fn fischer_burmeister(a: f64, b: f64) -> f64 {
    let r = a.hypot(b);
    if a > 0.0 && b > 0.0 {
        // (a + b)² − r² = 2ab, without cancellation
        2.0 * a * b / (a + b + r)
    } else {
        a + b - r
    }
}

/// `(∂φ/∂a, ∂φ/∂b)`, smoothed near `(0, 0)`.
#[inline]
pub fn fischer_burmeister_grad(a: f64, b: f64) -> (f64, f64) {
    let r2 = a * a + b * b;
    if r2 < FB_EPSILON {
        let r = (r2 + FB_EPSILON).sqrt();
        return (1.0 - a / r, 1.0 - b / r);
    }
    let r = a.hypot(b);
    let da = if a > 0.0 { b * b / ((r + a) * r) } else { 1.0 - a / r };
    let db = if b > 0.0 { a * a / ((r + b) * r) } else { 1.0 - b / r };
    (da, db)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierMode {
    /// One multiplier per hyperplane constraint, used by both robots.
    #[default]
    Shared,
    /// Separate multiplier copies for each robot of a pair.
    PerRobot,
}

/// Multipliers of one pair's hyperplane constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBlock {
    pub pair_index: usize,
    pub pair: RobotPair,
    /// For each multiplier copy, the player slots whose stationarity uses it.
    pub copies: Vec<Vec<usize>>,
    pub offset: usize,
}

/// Offsets of every block of `z` (and of `F`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KktLayout {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub position_dim: usize,
    /// Robot index of each player slot.
    pub players: Vec<usize>,
    pub pair_blocks: Vec<PairBlock>,
    pub mode: MultiplierMode,
    x_offset: usize,
    u_offset: usize,
    w_offset: usize,
    v_offset: usize,
    lambda_hi_offset: usize,
    lambda_lo_offset: usize,
    total: usize,
}

impl KktLayout {
    /// Layout for the given decision players. Pairs that involve no player
    /// are dropped.
    pub fn new(spec: &GameSpec, players: &[usize], mode: MultiplierMode) -> Result<Self> {
        if players.is_empty() {
            return Err(Error::Config("at least one decision player is required".into()));
        }
        for (k, &p) in players.iter().enumerate() {
            if p >= spec.num_robots() || players[..k].contains(&p) {
                return Err(Error::Config(format!("invalid player list {players:?}")));
            }
        }
        let (s, c) = (spec.state_dim(), spec.control_dim());
        let k = spec.horizon() - 1;
        let np = players.len();
        let slot_of = |robot: usize| players.iter().position(|&p| p == robot);

        let x_offset = 0;
        let u_offset = x_offset + np * k * s;
        let w_offset = u_offset + np * k * c;
        let v_offset = w_offset + np * k * s;
        let mut offset = v_offset;
        let mut pair_blocks = Vec::new();
        for (pair_index, &pair) in spec.pairs().iter().enumerate() {
            let (si, sj) = (slot_of(pair.i), slot_of(pair.j));
            let users: Vec<usize> = [si, sj].into_iter().flatten().collect();
            if users.is_empty() {
                continue;
            }
            let copies = match mode {
                MultiplierMode::Shared => vec![users],
                MultiplierMode::PerRobot => users.into_iter().map(|u| vec![u]).collect(),
            };
            let len = copies.len() * k;
            pair_blocks.push(PairBlock {
                pair_index,
                pair,
                copies,
                offset,
            });
            offset += len;
        }
        let lambda_hi_offset = offset;
        let lambda_lo_offset = lambda_hi_offset + np * k * c;
        let total = lambda_lo_offset + np * k * c;
        Ok(KktLayout {
            horizon: spec.horizon(),
            state_dim: s,
            control_dim: c,
            position_dim: spec.position_dim(),
            players: players.to_vec(),
            pair_blocks,
            mode,
            x_offset,
            u_offset,
            w_offset,
            v_offset,
            lambda_hi_offset,
            lambda_lo_offset,
            total,
        })
    }

    /// Layout with every robot a decision player.
    pub fn full(spec: &GameSpec, mode: MultiplierMode) -> Result<Self> {
        let players: Vec<usize> = (0..spec.num_robots()).collect();
        KktLayout::new(spec, &players, mode)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of control steps `T − 1`.
    pub fn steps(&self) -> usize {
        self.horizon - 1
    }

    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    pub fn slot_of(&self, robot: usize) -> Option<usize> {
        self.players.iter().position(|&p| p == robot)
    }

    pub fn x_block(&self) -> Range<usize> {
        self.x_offset..self.u_offset
    }

    pub fn u_block(&self) -> Range<usize> {
        self.u_offset..self.w_offset
    }

    pub fn w_block(&self) -> Range<usize> {
        self.w_offset..self.v_offset
    }

    pub fn v_block(&self) -> Range<usize> {
        self.v_offset..self.lambda_hi_offset
    }

    pub fn lambda_hi_block(&self) -> Range<usize> {
        self.lambda_hi_offset..self.lambda_lo_offset
    }

    pub fn lambda_lo_block(&self) -> Range<usize> {
        self.lambda_lo_offset..self.total
    }

    /// Start of `x^i_t` for `t = 1..T` (zero-based step index).
    #[inline]
    pub fn x_index(&self, slot: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t < self.horizon);
        self.x_offset + (slot * self.steps() + t - 1) * self.state_dim
    }

    /// Start of `u^i_t` for `t = 0..T−1`.
    #[inline]
    pub fn u_index(&self, slot: usize, t: usize) -> usize {
        self.u_offset + (slot * self.steps() + t) * self.control_dim
    }

    /// Start of the multiplier of `x_{t+1} − A x_t − B u_t`.
    #[inline]
    pub fn w_index(&self, slot: usize, t: usize) -> usize {
        self.w_offset + (slot * self.steps() + t) * self.state_dim
    }

    #[inline]
    pub fn v_index(&self, block: &PairBlock, copy: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t < self.horizon);
        block.offset + copy * self.steps() + t - 1
    }

    #[inline]
    pub fn lambda_hi_index(&self, slot: usize, t: usize) -> usize {
        self.lambda_hi_offset + (slot * self.steps() + t) * self.control_dim
    }

    #[inline]
    pub fn lambda_lo_index(&self, slot: usize, t: usize) -> usize {
        self.lambda_lo_offset + (slot * self.steps() + t) * self.control_dim
    }

    /// Indices of every complementarity multiplier together with its row.
    pub fn complementarity_range(&self) -> Range<usize> {
        self.v_offset..self.total
    }

    pub fn unpack(&self, z: &DVector<f64>) -> Result<SolutionParts> {
        if z.len() != self.total {
            return Err(Error::Dimension {
                what: "solution vector",
                expected: self.total,
                got: z.len(),
            });
        }
        let k = self.steps();
        let (s, c) = (self.state_dim, self.control_dim);
        let np = self.num_players();
        let block = |offset: usize, slot: usize, width: usize| {
            DMatrix::from_row_slice(k, width, &z.as_slice()[offset + slot * k * width..][..k * width])
        };
        Ok(SolutionParts {
            states: (0..np).map(|i| block(self.x_offset, i, s)).collect(),
            controls: (0..np).map(|i| block(self.u_offset, i, c)).collect(),
            dynamics_multipliers: (0..np).map(|i| block(self.w_offset, i, s)).collect(),
            hyperplane_multipliers: self
                .pair_blocks
                .iter()
                .map(|b| {
                    (0..b.copies.len())
                        .map(|copy| {
                            DVector::from_column_slice(&z.as_slice()[b.offset + copy * k..][..k])
                        })
                        .collect()
                })
                .collect(),
            lambda_hi: (0..np).map(|i| block(self.lambda_hi_offset, i, c)).collect(),
            lambda_lo: (0..np).map(|i| block(self.lambda_lo_offset, i, c)).collect(),
        })
    }

    pub fn pack(&self, parts: &SolutionParts) -> Result<DVector<f64>> {
        let k = self.steps();
        let (s, c) = (self.state_dim, self.control_dim);
        let np = self.num_players();
        let mut z = DVector::zeros(self.total);
        let mut write = |offset: usize, mats: &[DMatrix<f64>], width: usize| -> Result<()> {
            if mats.len() != np {
                return Err(Error::Dimension {
                    what: "per-player blocks",
                    expected: np,
                    got: mats.len(),
                });
            }
            for (slot, m) in mats.iter().enumerate() {
                if m.shape() != (k, width) {
                    return Err(Error::Dimension {
                        what: "per-player block entries",
                        expected: k * width,
                        got: m.len(),
                    });
                }
                for t in 0..k {
                    for r in 0..width {
                        z[offset + (slot * k + t) * width + r] = m[(t, r)];
                    }
                }
            }
            Ok(())
        };
        write(self.x_offset, &parts.states, s)?;
        write(self.u_offset, &parts.controls, c)?;
        write(self.w_offset, &parts.dynamics_multipliers, s)?;
        write(self.lambda_hi_offset, &parts.lambda_hi, c)?;
        write(self.lambda_lo_offset, &parts.lambda_lo, c)?;
        if parts.hyperplane_multipliers.len() != self.pair_blocks.len() {
            return Err(Error::Dimension {
                what: "hyperplane multiplier blocks",
                expected: self.pair_blocks.len(),
                got: parts.hyperplane_multipliers.len(),
            });
        }
        for (b, copies) in self.pair_blocks.iter().zip(&parts.hyperplane_multipliers) {
            if copies.len() != b.copies.len() || copies.iter().any(|v| v.len() != k) {
                return Err(Error::Dimension {
                    what: "hyperplane multiplier copies",
                    expected: b.copies.len() * k,
                    got: copies.iter().map(|v| v.len()).sum(),
                });
            }
            for (copy, v) in copies.iter().enumerate() {
                z.rows_mut(b.offset + copy * k, k).copy_from(v);
            }
        }
        Ok(z)
    }
}

/// `z` split into named blocks. Per-player matrices have one row per step:
/// states for `t = 1..T`, everything else for `t = 0..T−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionParts {
    pub states: Vec<DMatrix<f64>>,
    pub controls: Vec<DMatrix<f64>>,
    pub dynamics_multipliers: Vec<DMatrix<f64>>,
    /// Per pair block, per multiplier copy, one entry per `t = 1..T`.
    pub hyperplane_multipliers: Vec<Vec<DVector<f64>>>,
    pub lambda_hi: Vec<DMatrix<f64>>,
    pub lambda_lo: Vec<DMatrix<f64>>,
}

/// Trajectory encoded by `z`. Non-players are copied from `fixed`, or held
/// at their initial state when there is none.
pub fn extract_trajectory(
    spec: &GameSpec,
    layout: &KktLayout,
    z: &DVector<f64>,
    fixed: Option<&Trajectory>,
) -> Result<Trajectory> {
    if z.len() != layout.len() {
        return Err(Error::Dimension {
            what: "solution vector",
            expected: layout.len(),
            got: z.len(),
        });
    }
    let l = layout;
    let s = l.state_dim;
    let mut traj = match fixed {
        Some(f) => {
            f.check_shape(spec)?;
            f.clone()
        }
        None => {
            let mut t = Trajectory::zeros(spec);
            for i in 0..spec.num_robots() {
                let x0 = spec.initial_robot_state(i);
                for step in 0..spec.horizon() {
                    for r in 0..s {
                        t.states_mut()[(step, i * s + r)] = x0[r];
                    }
                }
            }
            t
        }
    };
    for (slot, &robot) in l.players.iter().enumerate() {
        let x0 = spec.initial_robot_state(robot);
        for r in 0..s {
            traj.states_mut()[(0, robot * s + r)] = x0[r];
        }
        for t in 1..l.horizon {
            let x = l.x_index(slot, t);
            for r in 0..s {
                traj.states_mut()[(t, robot * s + r)] = z[x + r];
            }
        }
        for t in 0..l.steps() {
            let u = l.u_index(slot, t);
            for r in 0..l.control_dim {
                traj.controls_mut()[(t, robot * l.control_dim + r)] = z[u + r];
            }
        }
    }
    Ok(traj)
}

/// Residual and Jacobians of the equilibrium conditions at fixed θ.
#[derive(Debug, Clone)]
pub struct KktSystem<'a> {
    spec: &'a GameSpec,
    theta: &'a ThetaParams,
    layout: KktLayout,
    alphas: Vec<f64>,
    control_weights: Vec<f64>,
    fixed: Option<&'a Trajectory>,
}

impl<'a> KktSystem<'a> {
    /// Every robot a decision player.
    pub fn new(spec: &'a GameSpec, theta: &'a ThetaParams, mode: MultiplierMode) -> Result<Self> {
        let layout = KktLayout::full(spec, mode)?;
        Self::with_layout(spec, theta, layout, None)
    }

    /// Only `players` decide; the remaining robots follow `fixed`.
    pub fn with_players(
        spec: &'a GameSpec,
        theta: &'a ThetaParams,
        players: &[usize],
        fixed: &'a Trajectory,
        mode: MultiplierMode,
    ) -> Result<Self> {
        fixed.check_shape(spec)?;
        let layout = KktLayout::new(spec, players, mode)?;
        Self::with_layout(spec, theta, layout, Some(fixed))
    }

    fn with_layout(
        spec: &'a GameSpec,
        theta: &'a ThetaParams,
        layout: KktLayout,
        fixed: Option<&'a Trajectory>,
    ) -> Result<Self> {
        theta.validate(spec)?;
        let alphas = spec
            .pairs()
            .iter()
            .map(|&p| alpha_from_initial_state(spec, p))
            .collect::<Result<Vec<_>>>()?;
        let control_weights = (0..spec.num_robots())
            .map(|i| theta.control_weight(spec, i))
            .collect();
        Ok(KktSystem {
            spec,
            theta,
            layout,
            alphas,
            control_weights,
            fixed,
        })
    }

    /// Replaces the effective control weights (used for continuation).
    pub fn set_control_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.spec.num_robots() {
            return Err(Error::Dimension {
                what: "control weights",
                expected: self.spec.num_robots(),
                got: weights.len(),
            });
        }
        self.control_weights = weights;
        Ok(())
    }

    pub fn control_weights(&self) -> &[f64] {
        &self.control_weights
    }

    pub fn layout(&self) -> &KktLayout {
        &self.layout
    }

    pub fn spec(&self) -> &GameSpec {
        self.spec
    }

    pub fn theta(&self) -> &ThetaParams {
        self.theta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check_len(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.layout.len() {
            return Err(Error::Dimension {
                what: "solution vector",
                expected: self.layout.len(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Planar position of any robot at step `t`.
    fn planar(&self, z: &DVector<f64>, robot: usize, t: usize) -> [f64; 2] {
        if t == 0 {
            return self.spec.initial_planar_position(robot);
        }
        match self.layout.slot_of(robot) {
            Some(slot) => {
                let i = self.layout.x_index(slot, t);
                [z[i], z[i + 1]]
            }
            None => self
                .fixed
                .expect("non-player robots need a fixed trajectory")
                .planar_position(t, robot),
        }
    }

    /// Stacked `F(z; θ)`.
    pub fn residual(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(z)?;
        let l = &self.layout;
        let (s, c, p) = (l.state_dim, l.control_dim, l.position_dim);
        let k = l.steps();
        let a = self.spec.dynamics().a();
        let b = self.spec.dynamics().b();
        let umax = self.spec.thrust_limit();
        let mut f = DVector::zeros(l.len());

        for (slot, &robot) in l.players.iter().enumerate() {
            let xi = self.control_weights[robot];
            let goal = self.spec.goal(robot);
            let x0 = self.spec.initial_robot_state(robot);

            for t in 1..=k {
                let row = l.x_index(slot, t);
                let w_prev = l.w_index(slot, t - 1);
                for r in 0..s {
                    f[row + r] -= z[w_prev + r];
                }
                if t < k {
                    let w = l.w_index(slot, t);
                    for r in 0..s {
                        let mut acc = 0.0;
                        for q in 0..s {
                            acc += a[(q, r)] * z[w + q];
                        }
                        f[row + r] += acc;
                    }
                } else {
                    for d in 0..p {
                        f[row + d] += 2.0 * (z[row + d] - goal[d]);
                    }
                }
            }

            for t in 0..k {
                let row = l.u_index(slot, t);
                let w = l.w_index(slot, t);
                let (lh, ll) = (l.lambda_hi_index(slot, t), l.lambda_lo_index(slot, t));
                for r in 0..c {
                    let mut acc = 2.0 * xi * z[row + r] - z[lh + r] + z[ll + r];
                    for q in 0..s {
                        acc += b[(q, r)] * z[w + q];
                    }
                    f[row + r] = acc;
                    let u = z[row + r];
                    f[lh + r] = fischer_burmeister(umax + u, z[lh + r]);
                    f[ll + r] = fischer_burmeister(umax - u, z[ll + r]);
                }
            }

            for t in 0..k {
                let row = l.w_index(slot, t);
                let next = l.x_index(slot, t + 1);
                let u = l.u_index(slot, t);
                for r in 0..s {
                    let mut acc = z[next + r];
                    for q in 0..s {
                        let xq = if t == 0 { x0[q] } else { z[l.x_index(slot, t) + q] };
                        acc -= a[(r, q)] * xq;
                    }
                    for q in 0..c {
                        acc -= b[(r, q)] * z[u + q];
                    }
                    f[row + r] = acc;
                }
            }
        }

        for block in &l.pair_blocks {
            let params = self.theta.pairs[block.pair_index];
            let alpha = self.alphas[block.pair_index];
            for t in 1..=k {
                let n = hyperplane_normal(alpha, params.omega, t);
                let pi = self.planar(z, block.pair.i, t);
                let pj = self.planar(z, block.pair.j, t);
                let h = hyperplane_value(alpha, params, t, pi, pj);
                for (copy, users) in block.copies.iter().enumerate() {
                    let vi = l.v_index(block, copy, t);
                    let v = z[vi];
                    f[vi] = fischer_burmeister(h, v);
                    for &slot in users {
                        let sign = self.sign_for(block.pair, l.players[slot]);
                        let row = l.x_index(slot, t);
                        f[row] += sign * v * n[0];
                        f[row + 1] += sign * v * n[1];
                    }
                }
            }
        }
        Ok(f)
    }

    /// `−1` for the robot that stays outside the zone, `+1` for its centre.
    #[inline]
    fn sign_for(&self, pair: RobotPair, robot: usize) -> f64 {
        if robot == pair.i {
            -1.0
        } else {
            1.0
        }
    }

    /// `∂F/∂z` as coordinate triplets (duplicates are summed).
    pub fn jacobian(&self, z: &DVector<f64>) -> Result<Triplets> {
        self.check_len(z)?;
        let l = &self.layout;
        let (s, c, p) = (l.state_dim, l.control_dim, l.position_dim);
        let k = l.steps();
        let a = self.spec.dynamics().a();
        let b = self.spec.dynamics().b();
        let umax = self.spec.thrust_limit();
        let np = l.num_players();
        let mut jac = Triplets::with_capacity(
            l.len(),
            np * k * (2 * s * s + 2 * s * c + 3 * s + 8 * c) + 8 * l.v_block().len(),
        );

        for (slot, &robot) in l.players.iter().enumerate() {
            let xi = self.control_weights[robot];
            for t in 1..=k {
                let row = l.x_index(slot, t);
                let w_prev = l.w_index(slot, t - 1);
                for r in 0..s {
                    jac.push(row + r, w_prev + r, -1.0);
                }
                if t < k {
                    let w = l.w_index(slot, t);
                    for r in 0..s {
                        for q in 0..s {
                            if a[(q, r)] != 0.0 {
                                jac.push(row + r, w + q, a[(q, r)]);
                            }
                        }
                    }
                } else {
                    for d in 0..p {
                        jac.push(row + d, row + d, 2.0);
                    }
                }
            }

            for t in 0..k {
                let row = l.u_index(slot, t);
                let w = l.w_index(slot, t);
                let (lh, ll) = (l.lambda_hi_index(slot, t), l.lambda_lo_index(slot, t));
                for r in 0..c {
                    jac.push(row + r, row + r, 2.0 * xi);
                    for q in 0..s {
                        if b[(q, r)] != 0.0 {
                            jac.push(row + r, w + q, b[(q, r)]);
                        }
                    }
                    jac.push(row + r, lh + r, -1.0);
                    jac.push(row + r, ll + r, 1.0);

                    let u = z[row + r];
                    let (da, db) = fischer_burmeister_grad(umax + u, z[lh + r]);
                    jac.push(lh + r, row + r, da);
                    jac.push(lh + r, lh + r, db);
                    let (da, db) = fischer_burmeister_grad(umax - u, z[ll + r]);
                    jac.push(ll + r, row + r, -da);
                    jac.push(ll + r, ll + r, db);
                }
            }

            for t in 0..k {
                let row = l.w_index(slot, t);
                let next = l.x_index(slot, t + 1);
                let u = l.u_index(slot, t);
                for r in 0..s {
                    jac.push(row + r, next + r, 1.0);
                    if t > 0 {
                        let x = l.x_index(slot, t);
                        for q in 0..s {
                            if a[(r, q)] != 0.0 {
                                jac.push(row + r, x + q, -a[(r, q)]);
                            }
                        }
                    }
                    for q in 0..c {
                        if b[(r, q)] != 0.0 {
                            jac.push(row + r, u + q, -b[(r, q)]);
                        }
                    }
                }
            }
        }

        for block in &l.pair_blocks {
            let params = self.theta.pairs[block.pair_index];
            let alpha = self.alphas[block.pair_index];
            let slot_i = l.slot_of(block.pair.i);
            let slot_j = l.slot_of(block.pair.j);
            for t in 1..=k {
                let n = hyperplane_normal(alpha, params.omega, t);
                let pi = self.planar(z, block.pair.i, t);
                let pj = self.planar(z, block.pair.j, t);
                let h = hyperplane_value(alpha, params, t, pi, pj);
                for (copy, users) in block.copies.iter().enumerate() {
                    let vi = l.v_index(block, copy, t);
                    let (da, db) = fischer_burmeister_grad(h, z[vi]);
                    jac.push(vi, vi, db);
                    if let Some(si) = slot_i {
                        let x = l.x_index(si, t);
                        jac.push(vi, x, da * n[0]);
                        jac.push(vi, x + 1, da * n[1]);
                    }
                    if let Some(sj) = slot_j {
                        let x = l.x_index(sj, t);
                        jac.push(vi, x, -da * n[0]);
                        jac.push(vi, x + 1, -da * n[1]);
                    }
                    for &slot in users {
                        let sign = self.sign_for(block.pair, l.players[slot]);
                        let row = l.x_index(slot, t);
                        jac.push(row, vi, sign * n[0]);
                        jac.push(row + 1, vi, sign * n[1]);
                    }
                }
            }
        }
        Ok(jac)
    }

    /// `∂F/∂z` as a dense matrix.
    pub fn jacobian_dense(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.jacobian(z)?.to_dense())
    }

    /// `∂F/∂θ` over the learnable entries, in learning coordinates
    /// (ω, ln ρ, ln ξ). Tied entries add their columns.
    pub fn theta_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_len(z)?;
        let l = &self.layout;
        let k = l.steps();
        let mut out = DMatrix::zeros(l.len(), self.theta.learnable.len());
        for (col, param) in self.theta.learnable.iter().enumerate() {
            for &target in &param.targets {
                match param.kind {
                    ParamKind::Omega | ParamKind::Rho => {
                        let Some(block) = l.pair_blocks.iter().find(|b| b.pair_index == target)
                        else {
                            continue;
                        };
                        let params = self.theta.pairs[target];
                        let alpha = self.alphas[target];
                        for t in 1..=k {
                            let n = hyperplane_normal(alpha, params.omega, t);
                            let pi = self.planar(z, block.pair.i, t);
                            let pj = self.planar(z, block.pair.j, t);
                            let h = hyperplane_value(alpha, params, t, pi, pj);
                            let tf = t as f64;
                            // ∂n/∂ω = t·[−sin, cos]
                            let dn = [-tf * n[1], tf * n[0]];
                            let dh = match param.kind {
                                ParamKind::Omega => dn[0] * (pi[0] - pj[0]) + dn[1] * (pi[1] - pj[1]),
                                _ => -params.rho,
                            };
                            for (copy, users) in block.copies.iter().enumerate() {
                                let vi = l.v_index(block, copy, t);
                                let v = z[vi];
                                let (da, _) = fischer_burmeister_grad(h, v);
                                out[(vi, col)] += da * dh;
                                if param.kind == ParamKind::Omega {
                                    for &slot in users {
                                        let sign = self.sign_for(block.pair, l.players[slot]);
                                        let row = l.x_index(slot, t);
                                        out[(row, col)] += sign * v * dn[0];
                                        out[(row + 1, col)] += sign * v * dn[1];
                                    }
                                }
                            }
                        }
                    }
                    ParamKind::Xi => {
                        let Some(slot) = l.slot_of(target) else {
                            continue;
                        };
                        let xi = self.control_weights[target];
                        for t in 0..k {
                            let row = l.u_index(slot, t);
                            for r in 0..l.control_dim {
                                out[(row + r, col)] += 2.0 * xi * z[row + r];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `(∇_{x^i} L^i, ∇_{u^i} L^i)` for one player, read off the residual.
    pub fn lagrangian_gradient(
        &self,
        z: &DVector<f64>,
        robot: usize,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let slot = self
            .layout
            .slot_of(robot)
            .ok_or_else(|| Error::Config(format!("robot {robot} is not a decision player")))?;
        let f = self.residual(z)?;
        let l = &self.layout;
        let k = l.steps();
        let xs = f.rows(l.x_index(slot, 1), k * l.state_dim).into_owned();
        let us = f.rows(l.u_index(slot, 0), k * l.control_dim).into_owned();
        Ok((xs, us))
    }

    /// Trajectory encoded by `z`; see [`extract_trajectory`].
    pub fn trajectory(&self, z: &DVector<f64>) -> Result<Trajectory> {
        extract_trajectory(self.spec, &self.layout, z, self.fixed)
    }

    /// Writes the players' states and controls from `traj` into `z`.
    pub fn write_trajectory(&self, traj: &Trajectory, z: &mut DVector<f64>) -> Result<()> {
        traj.check_shape(self.spec)?;
        self.check_len(z)?;
        let l = &self.layout;
        for (slot, &robot) in l.players.iter().enumerate() {
            for t in 1..l.horizon {
                let x = l.x_index(slot, t);
                for r in 0..l.state_dim {
                    z[x + r] = traj.states()[(t, robot * l.state_dim + r)];
                }
            }
            for t in 0..l.steps() {
                let u = l.u_index(slot, t);
                for r in 0..l.control_dim {
                    z[u + r] = traj.controls()[(t, robot * l.control_dim + r)];
                }
            }
        }
        Ok(())
    }

    /// Hyperplane values `H_t` per pair block for `t = 1..T`.
    pub fn hyperplane_values(&self, z: &DVector<f64>) -> Vec<Vec<f64>> {
        let l = &self.layout;
        l.pair_blocks
            .iter()
            .map(|block| {
                let params = self.theta.pairs[block.pair_index];
                let alpha = self.alphas[block.pair_index];
                (1..l.horizon)
                    .map(|t| {
                        hyperplane_value(
                            alpha,
                            params,
                            t,
                            self.planar(z, block.pair.i, t),
                            self.planar(z, block.pair.j, t),
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Value `a` of the complementarity pair whose multiplier sits at `index`.
    /// `None` for indices outside the multiplier blocks.
    pub fn complementarity_argument(&self, z: &DVector<f64>, index: usize) -> Option<f64> {
        let l = &self.layout;
        let k = l.steps();
        let umax = self.spec.thrust_limit();
        if l.lambda_hi_block().contains(&index) {
            let rel = index - l.lambda_hi_offset;
            return Some(umax + z[l.u_offset + rel]);
        }
        if l.lambda_lo_block().contains(&index) {
            let rel = index - l.lambda_lo_offset;
            return Some(umax - z[l.u_offset + rel]);
        }
        let block = l
            .pair_blocks
            .iter()
            .find(|b| (b.offset..b.offset + b.copies.len() * k).contains(&index))?;
        let t = (index - block.offset) % k + 1;
        let params = self.theta.pairs[block.pair_index];
        Some(hyperplane_value(
            self.alphas[block.pair_index],
            params,
            t,
            self.planar(z, block.pair.i, t),
            self.planar(z, block.pair.j, t),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{hcw_from_mean_motion, planar_from_full};
    use crate::game::{all_pairs, LearnableParam};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize, horizon: usize, pairs: Vec<RobotPair>) -> GameSpec {
        let dynamics = planar_from_full(&hcw_from_mean_motion(1.1332e-3, 5.0, 100.0).unwrap()).unwrap();
        let mut x0 = Vec::new();
        let mut goals = Vec::new();
        for i in 0..n {
            let a = i as f64 * 2.0 * std::f64::consts::PI / n as f64;
            x0.extend([100.0 * a.cos(), 100.0 * a.sin(), 0.0, 0.0]);
            goals.extend([-100.0 * a.cos(), -100.0 * a.sin()]);
        }
        GameSpec::new(
            dynamics,
            horizon,
            5.0,
            DVector::from_vec(x0),
            DMatrix::from_row_slice(n, 2, &goals),
            vec![1e-4; n],
            1.0,
            pairs,
        )
        .unwrap()
    }

    #[test]
    fn fb_values() {
        assert_eq!(fischer_burmeister(0.0, 0.0), 0.0);
        assert_relative_eq!(fischer_burmeister(3.0, 4.0), 2.0, epsilon = 1e-15);
        let (da, db) = fischer_burmeister_grad(3.0, 4.0);
        assert_relative_eq!(da, 0.4, epsilon = 1e-15);
        assert_relative_eq!(db, 0.2, epsilon = 1e-15);
        assert_eq!(fischer_burmeister(5.0, 0.0), 0.0);
        assert_eq!(fischer_burmeister_grad(5.0, 0.0).0, 0.0);
    }

    #[test]
    fn fb_zero_iff_complementary() {
        let vals = [-2.0, -0.5, 0.0, 0.5, 2.0];
        for &a in &vals {
            for &b in &vals {
                let comp = a >= 0.0 && b >= 0.0 && a * b == 0.0;
                assert_eq!(fischer_burmeister(a, b) == 0.0, comp, "a={a} b={b}");
            }
        }
    }

    #[test]
    fn layout_counts() {
        let s = spec(2, 44, vec![RobotPair::new(0, 1)]);
        let l = KktLayout::full(&s, MultiplierMode::Shared).unwrap();
        assert_eq!(l.x_block().len(), 344);
        assert_eq!(l.u_block().len(), 172);
        assert_eq!(l.v_block().len(), 43);
        assert_eq!(l.len(), 344 + 172 + 344 + 43 + 172 + 172);

        let s1 = spec(1, 10, vec![]);
        assert!(KktLayout::full(&s1, MultiplierMode::Shared).unwrap().v_block().is_empty());

        let s6 = spec(6, 12, all_pairs(6));
        let l6 = KktLayout::full(&s6, MultiplierMode::Shared).unwrap();
        assert_eq!(l6.v_block().len(), 15 * 11);
        let per = KktLayout::full(&s6, MultiplierMode::PerRobot).unwrap();
        assert_eq!(per.v_block().len(), 2 * 15 * 11);
    }

    #[test]
    fn pack_unpack_bijection() {
        let s = spec(3, 6, all_pairs(3));
        for mode in [MultiplierMode::Shared, MultiplierMode::PerRobot] {
            let l = KktLayout::full(&s, mode).unwrap();
            let z = DVector::from_fn(l.len(), |i, _| i as f64 * 0.5 - 3.0);
            let parts = l.unpack(&z).unwrap();
            assert_eq!(l.pack(&parts).unwrap(), z);
        }
    }

    fn random_point(sys: &KktSystem, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let l = sys.layout();
        let mut z = DVector::from_fn(l.len(), |_, _| rng.gen_range(-1.0..1.0));
        for i in l.x_block() {
            z[i] *= 80.0;
        }
        z
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = spec(3, 5, all_pairs(3));
        let mut theta = ThetaParams::uniform(3, 0.02, 20.0);
        theta.learnable.push(LearnableParam::xi(1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [MultiplierMode::Shared, MultiplierMode::PerRobot] {
            let sys = KktSystem::new(&s, &theta, mode).unwrap();
            for _ in 0..3 {
                let z = random_point(&sys, &mut rng);
                let jac = sys.jacobian_dense(&z).unwrap();
                for col in 0..z.len() {
                    let h = 1e-6 * (1.0 + z[col].abs());
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[col] += h;
                    zm[col] -= h;
                    let fd = (sys.residual(&zp).unwrap() - sys.residual(&zm).unwrap()) / (2.0 * h);
                    for row in 0..z.len() {
                        let err = (fd[row] - jac[(row, col)]).abs();
                        assert!(
                            err <= 1e-5 * (1.0 + jac[(row, col)].abs()),
                            "({row},{col}) fd {} analytic {}",
                            fd[row],
                            jac[(row, col)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shared_multiplier_column_hits_both_robots() {
        let s = spec(2, 5, vec![RobotPair::new(0, 1)]);
        let theta = ThetaParams::uniform(1, 0.01, 20.0);
        let sys = KktSystem::new(&s, &theta, MultiplierMode::Shared).unwrap();
        let z = DVector::from_element(sys.layout().len(), 0.3);
        let jac = sys.jacobian_dense(&z).unwrap();
        let l = sys.layout();
        let vi = l.v_index(&l.pair_blocks[0], 0, 2);
        assert!(jac[(l.x_index(0, 2), vi)] != 0.0);
        assert!(jac[(l.x_index(1, 2), vi)] != 0.0);
        assert_eq!(jac[(l.x_index(0, 2), vi)], -jac[(l.x_index(1, 2), vi)]);
    }

    #[test]
    fn dynamics_adjoint_pattern() {
        let s = spec(1, 5, vec![]);
        let theta = ThetaParams::uniform(0, 0.0, 1.0);
        let sys = KktSystem::new(&s, &theta, MultiplierMode::Shared).unwrap();
        let l = sys.layout();
        let mut z = DVector::zeros(l.len());
        let (wa, wb) = (l.w_index(0, 1), l.w_index(0, 2));
        for r in 0..4 {
            z[wa + r] = 1.0 + r as f64;
            z[wb + r] = -0.5 * r as f64 + 0.25;
        }
        let f = sys.residual(&z).unwrap();
        let a = s.dynamics().a();
        let expect = -z.rows(wa, 4).into_owned() + a.transpose() * z.rows(wb, 4);
        let row = l.x_index(0, 2);
        for r in 0..4 {
            assert_relative_eq!(f[row + r], expect[r], epsilon = 1e-12);
        }
    }

    #[test]
    fn theta_jacobian_matches_finite_differences() {
        let s = spec(2, 6, vec![RobotPair::new(0, 1)]);
        let mut theta = ThetaParams::uniform(1, 0.03, 25.0);
        theta.learnable.push(LearnableParam::xi(0));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sys = KktSystem::new(&s, &theta, MultiplierMode::Shared).unwrap();
        let z = random_point(&sys, &mut rng);
        let analytic = sys.theta_jacobian(&z).unwrap();
        let base = theta.internal_vector(&s);
        for col in 0..base.len() {
            let h = 1e-6 * (1.0 + base[col].abs());
            let eval = |delta: f64| {
                let mut th = theta.clone();
                let mut v = base.clone();
                v[col] += delta;
                th.set_internal(&s, &v).unwrap();
                KktSystem::new(&s, &th, MultiplierMode::Shared)
                    .unwrap()
                    .residual(&z)
                    .unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            for row in 0..z.len() {
                let err = (fd[row] - analytic[(row, col)]).abs();
                assert!(err <= 1e-5 * (1.0 + analytic[(row, col)].abs()), "row {row} col {col}");
            }
        }
    }

    #[test]
    fn theta_columns_sparse_outside_hyperplane_and_effort_rows() {
        let s = spec(2, 6, vec![RobotPair::new(0, 1)]);
        let theta = ThetaParams::uniform(1, 0.03, 25.0);
        let sys = KktSystem::new(&s, &theta, MultiplierMode::Shared).unwrap();
        let z = DVector::from_element(sys.layout().len(), 0.7);
        let jt = sys.theta_jacobian(&z).unwrap();
        let l = sys.layout();
        for range in [l.u_block(), l.w_block(), l.lambda_hi_block(), l.lambda_lo_block()] {
            for row in range {
                assert!(jt.row(row).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn terminal_rows_vanish_at_goal() {
        let s = spec(2, 5, vec![]);
        let theta = ThetaParams::uniform(0, 0.0, 1.0);
        let sys = KktSystem::new(&s, &theta, MultiplierMode::Shared).unwrap();
        let l = sys.layout();
        let mut z = DVector::zeros(l.len());
        for slot in 0..2 {
            let g = s.goal(slot);
            let row = l.x_index(slot, 4);
            z[row] = g[0];
            z[row + 1] = g[1];
        }
        let f = sys.residual(&z).unwrap();
        for slot in 0..2 {
            let row = l.x_index(slot, 4);
            assert_eq!(f[row], 0.0);
            assert_eq!(f[row + 1], 0.0);
        }
    }
}
