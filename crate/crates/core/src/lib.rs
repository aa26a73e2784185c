//! Open-loop dynamic games between spacecraft in relative orbital motion,
//! with rotating-hyperplane collision avoidance.
//!
//! The forward problem stacks every robot's KKT conditions into a mixed
//! complementarity problem solved by a semismooth Newton method. The inverse
//! problem differentiates that solution with respect to the hyperplane
//! parameters and fits them to an expert trajectory by gradient descent.

pub mod dynamics;
pub mod error;
pub mod game;
pub mod harness;
pub mod io;
pub mod kkt;
pub mod learner;
pub mod linalg;
pub mod scenario;
pub mod sensitivity;
pub mod solver;

pub use nalgebra;

pub use dynamics::{hcw_matrices, planar_dynamics, propagate, LinearDynamics, OrbitConstants};
pub use error::{Error, Result};
pub use game::{
    feasibility_report, FeasibilityReport, GameSpec, PairParams, RobotPair, SpatialMode, ThetaParams,
    Trajectory,
};
pub use kkt::{KktSystem, MultiplierMode};
pub use learner::{learn_parameters, LearnOptions, LearnOutcome};
pub use scenario::ScenarioConfig;
pub use sensitivity::{solution_sensitivity, SensitivityResult};
pub use solver::{best_response_check, solve_mcp, SolveOptions, SolveResult, SolveStatus};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
