//! Discrete-time Hill-Clohessy-Wiltshire (HCW) relative motion.
//!
//! Frame convention: `x` radial, `y` along-track, `z` cross-track (out of
//! plane). Full states are `(x, y, z, vx, vy, vz)`, controls are thrust forces
//! `(Fx, Fy, Fz)` in Newtons. The planar reduction keeps `(x, y, vx, vy)` and
//! `(Fx, Fy)`; the out-of-plane axis is decoupled from it.
//!
//! The zero-order-hold matrices are evaluated through `sin(x)/x`-style kernels
//! with series expansions near `x = nΔt = 0`, so the double-integrator limit
//! is reached smoothly and `n = 0` is accepted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravitational parameter of Earth, m^3/s^2.
pub const EARTH_MU: f64 = 3.986004418e14;
/// Mean Earth radius, m.
pub const EARTH_RADIUS: f64 = 6.371e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitConstants {
    /// m^3/s^2
    pub gravitational_parameter: f64,
    /// m
    pub earth_radius: f64,
    /// m
    pub orbital_altitude: f64,
    /// kg
    pub satellite_mass: f64,
    /// Discretization interval, s.
    pub dt: f64,
}

impl OrbitConstants {
    /// Earth-orbit constants with the standard `μ` and mean radius.
    pub fn earth(orbital_altitude: f64, satellite_mass: f64, dt: f64) -> Result<Self> {
        let c = OrbitConstants {
            gravitational_parameter: EARTH_MU,
            earth_radius: EARTH_RADIUS,
            orbital_altitude,
            satellite_mass,
            dt,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.gravitational_parameter, "gravitational_parameter"),
            (self.earth_radius, "earth_radius"),
            (self.orbital_altitude, "orbital_altitude"),
            (self.satellite_mass, "satellite_mass"),
            (self.dt, "dt"),
        ];
        for (value, name) in checks {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    pub fn semi_major_axis(&self) -> f64 {
        self.earth_radius + self.orbital_altitude
    }

    /// Mean motion of the reference orbit at the configured altitude, rad/s.
    pub fn mean_motion(&self) -> f64 {
        let a = self.semi_major_axis();
        (self.gravitational_parameter / (a * a * a)).sqrt()
    }
}

/// Mean motion `sqrt(μ / (R + h)^3)` for a circular orbit at `altitude`.
pub fn mean_motion(altitude: f64, constants: &OrbitConstants) -> Result<f64> {
    if !(altitude.is_finite() && altitude > 0.0) {
        return Err(Error::Domain(format!(
            "orbital altitude must be positive, got {altitude}"
        )));
    }
    let a = constants.earth_radius + altitude;
    let n = (constants.gravitational_parameter / (a * a * a)).sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Domain(format!("mean motion is not positive: {n}")));
    }
    Ok(n)
}

/// `x_{t+1} = A x_t + B u_t` for one robot.
///
/// States are laid out as `[positions; velocities]`, each `position_dim`
/// long, and there is one control per position axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    position_dim: usize,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, position_dim: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension {
                what: "A must be square",
                expected: n,
                got: a.ncols(),
            });
        }
        if n != 2 * position_dim {
            return Err(Error::Dimension {
                what: "state dimension must be twice the position dimension",
                expected: 2 * position_dim,
                got: n,
            });
        }
        if b.nrows() != n {
            return Err(Error::Dimension {
                what: "rows of B",
                expected: n,
                got: b.nrows(),
            });
        }
        if b.ncols() != position_dim {
            return Err(Error::Dimension {
                what: "columns of B",
                expected: position_dim,
                got: b.ncols(),
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dynamics matrices"));
        }
        Ok(LinearDynamics { a, b, position_dim })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn position_dim(&self) -> usize {
        self.position_dim
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

// sin(x)/x
fn sinc(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let x2 = x * x;
        1.0 - x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0)))
    } else {
        x.sin() / x
    }
}

// (1 - cos x)/x^2
fn versc(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let x2 = x * x;
        0.5 * (1.0 - x2 / 12.0 * (1.0 - x2 / 30.0 * (1.0 - x2 / 56.0 * (1.0 - x2 / 90.0))))
    } else {
        let h = (0.5 * x).sin();
        2.0 * h * h / (x * x)
    }
}

// (x - sin x)/x^3
fn sinc_rem(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let x2 = x * x;
        (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0 * (1.0 - x2 / 110.0)))) / 6.0
    } else {
        (x - x.sin()) / (x * x * x)
    }
}

/// Full 3D HCW matrices for a given mean motion `n ≥ 0` (rad/s), step `dt`
/// (s) and spacecraft mass (kg). `n = 0` gives the double integrator.
pub fn hcw_from_mean_motion(n: f64, dt: f64, mass: f64) -> Result<LinearDynamics> {
    if !(n.is_finite() && n >= 0.0) {
        return Err(Error::Domain(format!("mean motion must be >= 0, got {n}")));
    }
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(Error::Domain(format!("dt must be >= 0, got {dt}")));
    }
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Domain(format!("mass must be positive, got {mass}")));
    }
    let h = dt;
    let x = n * h;
    let (s, c) = x.sin_cos();
    let f1 = sinc(x);
    let f2 = versc(x);
    let f3 = sinc_rem(x);

    // s/n, (1-c)/n, (x - s)/n^2 etc. written through the kernels.
    let s_over_n = h * f1;
    let one_minus_c_over_n = h * x * f2;
    let one_minus_c_over_n2 = h * h * f2;
    let x_minus_s_over_n2 = h * h * x * f3;

    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(6, 6, &[
        1.0 + 3.0 * x * x * f2, 0.0, 0.0, s_over_n,                   2.0 * one_minus_c_over_n,  0.0,
        -6.0 * x * x * x * f3,  1.0, 0.0, -2.0 * one_minus_c_over_n,  h * (4.0 * f1 - 3.0),      0.0,
        0.0,                    0.0, c,   0.0,                        0.0,                       s_over_n,
        3.0 * n * x * f1,       0.0, 0.0, c,                          2.0 * s,                   0.0,
        -6.0 * n * x * x * f2,  0.0, 0.0, -2.0 * s,                   4.0 * c - 3.0,             0.0,
        0.0,                    0.0, -n * x * f1, 0.0,                0.0,                       c,
    ]);

    let inv_m = 1.0 / mass;
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(6, 3, &[
        one_minus_c_over_n2,          2.0 * x_minus_s_over_n2,        0.0,
        -2.0 * x_minus_s_over_n2,     h * h * (4.0 * f2 - 1.5),       0.0,
        0.0,                          0.0,                            one_minus_c_over_n2,
        s_over_n,                     2.0 * one_minus_c_over_n,       0.0,
        -2.0 * one_minus_c_over_n,    h * (4.0 * f1 - 3.0),           0.0,
        0.0,                          0.0,                            s_over_n,
    ]) * inv_m;

    LinearDynamics::new(a, b, 3)
}

/// The 6×6 / 6×3 discrete HCW system for the given orbit.
pub fn hcw_matrices(constants: &OrbitConstants) -> Result<LinearDynamics> {
    constants.validate()?;
    hcw_from_mean_motion(constants.mean_motion(), constants.dt, constants.satellite_mass)
}

const PLANAR_STATES: [usize; 4] = [0, 1, 3, 4];
const PLANAR_CONTROLS: [usize; 2] = [0, 1];

/// Drops the out-of-plane rows and columns of a 3D system.
pub fn planar_from_full(full: &LinearDynamics) -> Result<LinearDynamics> {
    if full.position_dim() != 3 {
        return Err(Error::Dimension {
            what: "planar reduction needs a 3D system",
            expected: 3,
            got: full.position_dim(),
        });
    }
    let a = DMatrix::from_fn(4, 4, |r, c| full.a[(PLANAR_STATES[r], PLANAR_STATES[c])]);
    let b = DMatrix::from_fn(4, 2, |r, c| full.b[(PLANAR_STATES[r], PLANAR_CONTROLS[c])]);
    LinearDynamics::new(a, b, 2)
}

/// The decoupled `(x, y, vx, vy)` subsystem.
pub fn planar_dynamics(constants: &OrbitConstants) -> Result<LinearDynamics> {
    planar_from_full(&hcw_matrices(constants)?)
}

/// The decoupled cross-track `(z, vz)` subsystem driven by `Fz`.
pub fn out_of_plane_from_full(full: &LinearDynamics) -> Result<LinearDynamics> {
    if full.position_dim() != 3 {
        return Err(Error::Dimension {
            what: "out-of-plane reduction needs a 3D system",
            expected: 3,
            got: full.position_dim(),
        });
    }
    let idx = [2usize, 5];
    let a = DMatrix::from_fn(2, 2, |r, c| full.a[(idx[r], idx[c])]);
    let b = DMatrix::from_fn(2, 1, |r, _| full.b[(idx[r], 2)]);
    LinearDynamics::new(a, b, 1)
}

/// Embeds a planar state `(x, y, vx, vy)` into the 3D layout with zero
/// out-of-plane components.
pub fn embed_planar_state(planar: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![planar[0], planar[1], 0.0, planar[2], planar[3], 0.0])
}

/// Continuous-time HCW system `(A_c, B_c)` with `ẋ = A_c x + B_c u`.
pub fn continuous_hcw(n: f64, mass: f64) -> (DMatrix<f64>, DMatrix<f64>) {
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

/// Rolls the dynamics forward from `x1`. `controls` holds one control per
/// row (`T-1` rows); the result has `T` rows, one state per row.
pub fn propagate(
    dynamics: &LinearDynamics,
    x1: &DVector<f64>,
    controls: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let nx = dynamics.state_dim();
    let nu = dynamics.control_dim();
    if x1.len() != nx {
        return Err(Error::Dimension {
            what: "initial state",
            expected: nx,
            got: x1.len(),
        });
    }
    if controls.ncols() != nu {
        return Err(Error::Dimension {
            what: "control width",
            expected: nu,
            got: controls.ncols(),
        });
    }
    let steps = controls.nrows();
    let mut states = DMatrix::zeros(steps + 1, nx);
    states.row_mut(0).copy_from(&x1.transpose());
    let mut x = x1.clone();
    for t in 0..steps {
        let u = controls.row(t).transpose();
        x = dynamics.step(&x, &u);
        states.row_mut(t + 1).copy_from(&x.transpose());
    }
    Ok(states)
}
