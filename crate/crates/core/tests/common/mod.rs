//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use hypergame::nalgebra::{DMatrix, DVector};
use hypergame::{GameSpec, ScenarioConfig, ThetaParams};

pub fn table() -> (GameSpec, ThetaParams, ThetaParams) {
    let cfg = ScenarioConfig::table();
    (
        cfg.game_spec().unwrap(),
        cfg.theta_truth().unwrap(),
        cfg.theta_initial().unwrap(),
    )
}

/// Continuous HCW model written straight from the equations of motion:
/// ẍ = 3n²x + 2nẏ + uₓ/m, ÿ = −2nẋ + u_y/m, z̈ = −n²z + u_z/m.
pub fn hcw_ode(n: f64, mass: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(6, 6);
    for k in 0..3 {
        a[(k, k + 3)] = 1.0;
    }
    a[(3, 0)] = 3.0 * n * n;
    a[(3, 4)] = 2.0 * n;
    a[(4, 3)] = -2.0 * n;
    a[(5, 2)] = -n * n;
    let mut b = DMatrix::zeros(6, 3);
    for k in 0..3 {
        b[(k + 3, k)] = 1.0 / mass;
    }
    (a, b)
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.abs().row_sum().max();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.125 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = m * scale;
    let dim = m.nrows();
    let mut sum = DMatrix::identity(dim, dim);
    let mut term = DMatrix::identity(dim, dim);
    for k in 1..=20 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Zero-order-hold discretization via the exponential of `[[A, B], [0, 0]]·Δt`.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s, c) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(s + c, s + c);
    aug.view_mut((0, 0), (s, s)).copy_from(&(a * dt));
    aug.view_mut((0, s), (s, c)).copy_from(&(b * dt));
    let e = expm(&aug);
    (e.view((0, 0), (s, s)).into_owned(), e.view((0, s), (s, c)).into_owned())
}

pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.abs().column_sum().max()
}

/// Unconstrained single-robot optimum of ‖p_T − g‖² + ξ Σ‖u_t‖² under
/// x_{t+1} = A x_t + B u_t, by condensing the dynamics into p_T = c + M u.
/// Returns states (T × s) and controls ((T−1) × c).
pub fn qp_oracle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    position_dim: usize,
    x1: &DVector<f64>,
    goal: &DVector<f64>,
    xi: f64,
    horizon: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s, c) = (a.nrows(), b.ncols());
    let k = horizon - 1;
    let mut powers = vec![DMatrix::identity(s, s)];
    for _ in 0..k {
        let next = a * powers.last().unwrap();
        powers.push(next);
    }
    let sel = DMatrix::<f64>::identity(s, s).rows(0, position_dim).into_owned();
    let free = &sel * &powers[k] * x1;
    let mut m = DMatrix::zeros(position_dim, k * c);
    for t in 0..k {
        let block = &sel * &powers[k - 1 - t] * b;
        m.view_mut((0, t * c), (position_dim, c)).copy_from(&block);
    }
    let h = m.transpose() * &m + DMatrix::identity(k * c, k * c) * xi;
    let rhs = m.transpose() * (goal - free);
    let u = h.cholesky().expect("positive definite").solve(&rhs);
    let mut states = DMatrix::zeros(horizon, s);
    let mut controls = DMatrix::zeros(k, c);
    let mut x = x1.clone();
    states.row_mut(0).copy_from(&x.transpose());
    for t in 0..k {
        let ut = u.rows(t * c, c).into_owned();
        x = a * &x + b * &ut;
        states.row_mut(t + 1).copy_from(&x.transpose());
        controls.row_mut(t).copy_from(&ut.transpose());
    }
    (states, controls)
}

/// Largest relative discrepancy between two vectors, scaled by the larger
/// of `floor` and the reference's magnitude.
pub fn rel_err(value: &DVector<f64>, reference: &DVector<f64>, floor: f64) -> f64 {
    (value - reference).amax() / reference.amax().max(floor)
}
