//! JSON scenario files with unit-bearing quantities.
//!
//! A physical quantity is either a bare number in SI units or a string such
//! as `"400 km"`. The original spelling is kept so a parsed file serializes
//! back to the same document.

use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dynamics::{hcw_matrices, planar_from_full, OrbitConstants, EARTH_MU, EARTH_RADIUS};
use crate::error::{Error, Result};
use crate::game::{all_pairs, GameSpec, LearnableParam, ParamKind, PairParams, RobotPair, SpatialMode, ThetaParams};
use crate::harness::{NoiseTarget, SweepConfig};
use crate::learner::{LearnOptions, LearningRates};
use crate::sensitivity::LossTarget;
use crate::solver::SolveOptions;

pub const TABLE_SCENARIO_JSON: &str = include_str!("../scenarios/table_scenario.json");
pub const SIX_ROBOT_JSON: &str = include_str!("../scenarios/six_robot.json");

/// A physical dimension and the unit suffixes accepted for it, with their
/// factor to SI.
pub trait Dimension {
    const NAME: &'static str;
    const UNITS: &'static [(&'static str, f64)];
}

macro_rules! dimension {
    ($ty:ident, $name:literal, [$(($unit:literal, $factor:expr)),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub struct $ty;
        impl Dimension for $ty {
            const NAME: &'static str = $name;
            const UNITS: &'static [(&'static str, f64)] = &[$(($unit, $factor)),+];
        }
    };
}

dimension!(Length, "length", [("m", 1.0), ("km", 1e3)]);
dimension!(Time, "time", [("s", 1.0), ("min", 60.0), ("h", 3600.0)]);
dimension!(Mass, "mass", [("kg", 1.0), ("g", 1e-3), ("t", 1e3)]);
dimension!(Force, "force", [("N", 1.0), ("mN", 1e-3), ("kN", 1e3)]);
dimension!(Speed, "speed", [("m/s", 1.0), ("km/s", 1e3)]);
dimension!(
    AngularRate,
    "angular rate",
    [("rad/s", 1.0), ("deg/s", std::f64::consts::PI / 180.0)]
);
dimension!(
    GravitationalParameter,
    "gravitational parameter",
    [("m^3/s^2", 1.0), ("km^3/s^2", 1e9)]
);

#[derive(Debug, Clone, PartialEq)]
enum Spelling {
    Number,
    Text(String),
}

/// A value of dimension `D`, stored in SI units.
#[derive(Clone, PartialEq)]
pub struct Quantity<D> {
    si: f64,
    spelling: Spelling,
    _dim: PhantomData<D>,
}

impl<D> fmt::Debug for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.spelling {
            Spelling::Number => write!(f, "{:?}", self.si),
            Spelling::Text(s) => write!(f, "{s:?}"),
        }
    }
}

impl<D: Dimension> Quantity<D> {
    pub fn si(value: f64) -> Self {
        Quantity {
            si: value,
            spelling: Spelling::Number,
            _dim: PhantomData,
        }
    }

    pub fn value(&self) -> f64 {
        self.si
    }

    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        let split = trimmed
            .char_indices()
            .find(|&(k, c)| {
                c.is_alphabetic() && !((c == 'e' || c == 'E') && starts_exponent(&trimmed[k..]))
            })
            .map_or(trimmed.len(), |(k, _)| k);
        let (number, unit) = trimmed.split_at(split);
        let number: f64 = number.trim().parse().map_err(|_| {
            Error::Config(format!("{} {text:?}: expected a number followed by a unit", D::NAME))
        })?;
        let unit = unit.trim();
        let factor = if unit.is_empty() {
            1.0
        } else {
            D::UNITS
                .iter()
                .find(|(u, _)| *u == unit)
                .map(|(_, f)| *f)
                .ok_or_else(|| {
                    let known: Vec<&str> = D::UNITS.iter().map(|(u, _)| *u).collect();
                    Error::Config(format!(
                        "{} {text:?}: unknown unit {unit:?} (expected one of {})",
                        D::NAME,
                        known.join(", ")
                    ))
                })?
        };
        let si = number * factor;
        if !si.is_finite() {
            return Err(Error::Config(format!("{} {text:?} is not finite", D::NAME)));
        }
        Ok(Quantity {
            si,
            spelling: Spelling::Text(text.to_string()),
            _dim: PhantomData,
        })
    }
}

fn starts_exponent(rest: &str) -> bool {
    let mut chars = rest.chars().skip(1);
    match chars.next() {
        Some(c) if c.is_ascii_digit() => true,
        Some('+' | '-') => chars.next().map_or(false, |c| c.is_ascii_digit()),
        _ => false,
    }
}

impl<D> Serialize for Quantity<D> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match &self.spelling {
            Spelling::Number => serializer.serialize_f64(self.si),
            Spelling::Text(s) => serializer.serialize_str(s),
        }
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Quantity<D> {
    fn deserialize<De: Deserializer<'de>>(deserializer: De) -> std::result::Result<Self, De::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) if v.is_finite() => Ok(Quantity::si(v)),
            Raw::Number(_) => Err(serde::de::Error::custom(format!("{} must be finite", D::NAME))),
            Raw::Text(s) => Quantity::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitConfig {
    pub altitude: Quantity<Length>,
    pub satellite_mass: Quantity<Mass>,
    #[serde(default = "default_earth_radius")]
    pub earth_radius: Quantity<Length>,
    #[serde(default = "default_mu")]
    pub gravitational_parameter: Quantity<GravitationalParameter>,
}

fn default_earth_radius() -> Quantity<Length> {
    Quantity::si(EARTH_RADIUS)
}

fn default_mu() -> Quantity<GravitationalParameter> {
    Quantity::si(EARTH_MU)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub dt: Quantity<Time>,
    pub total_time: Quantity<Time>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub position: Vec<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<Quantity<Speed>>>,
    pub goal: Vec<Quantity<Length>>,
    pub control_weight: f64,
}

/// `"all"` or an explicit list of `[i, j]` robot pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairSelection {
    All(AllPairs),
    List(Vec<[usize; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllPairs {
    All,
}

impl Default for PairSelection {
    fn default() -> Self {
        PairSelection::All(AllPairs::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairOverride {
    pub pair: [usize; 2],
    pub omega: Quantity<AngularRate>,
    pub rho: Quantity<Length>,
}

/// Hyperplane parameters: a default `(ω, ρ)` with optional per-pair values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaConfig {
    pub omega: Quantity<AngularRate>,
    pub rho: Quantity<Length>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_pair: Vec<PairOverride>,
}

/// Which entries of θ the learner may move. Tied entries share one value
/// across all pairs (or all robots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnableConfig {
    pub omega: bool,
    pub rho: bool,
    pub control_weights: bool,
    pub tied: bool,
}

impl Default for LearnableConfig {
    fn default() -> Self {
        LearnableConfig {
            omega: true,
            rho: true,
            control_weights: false,
            tied: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
    pub retreat_attempts: usize,
    pub loss_target: LossTarget,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        let d = LearnOptions::default();
        LearnerConfig {
            max_iterations: d.max_iterations,
            gradient_tol: d.gradient_tol,
            learning_rates: d.learning_rates,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon_hat: d.epsilon_hat,
            retreat_attempts: d.retreat_attempts,
            loss_target: d.loss_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub noise_levels: Vec<Quantity<Length>>,
    pub trials_per_level: usize,
    pub noise_target: NoiseTarget,
    pub velocity_sigmas: Vec<Quantity<Speed>>,
    pub velocity_trials: usize,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        ExperimentConfig {
            noise_levels: sweep.levels.into_iter().map(Quantity::si).collect(),
            trials_per_level: sweep.trials_per_level,
            noise_target: sweep.target,
            velocity_sigmas: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0].into_iter().map(Quantity::si).collect(),
            velocity_trials: 20,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub orbit: OrbitConfig,
    #[serde(default = "default_spatial_mode")]
    pub spatial_mode: SpatialMode,
    pub horizon: HorizonConfig,
    pub thrust_limit: Quantity<Force>,
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub pairs: PairSelection,
    pub theta: ThetaConfig,
    /// Starting point for learning; the ground truth when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_guess: Option<ThetaConfig>,
    #[serde(default)]
    pub learnable: LearnableConfig,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_spatial_mode() -> SpatialMode {
    SpatialMode::Planar
}

fn default_seed() -> u64 {
    2024
}

impl ScenarioConfig {
    /// Parses and validates; errors carry the line and column of the fault.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ScenarioConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The two-robot scenario from the simulation parameter table.
    pub fn table() -> Self {
        Self::from_json(TABLE_SCENARIO_JSON).expect("bundled table scenario is valid")
    }

    /// Six robots on a 100 m circle heading to antipodal goals.
    pub fn six_robot() -> Self {
        Self::from_json(SIX_ROBOT_JSON).expect("bundled six-robot scenario is valid")
    }

    pub fn position_dim(&self) -> usize {
        match self.spatial_mode {
            SpatialMode::Planar => 2,
            SpatialMode::Full3d => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.orbit_constants()?;
        self.horizon_steps()?;
        let thrust = self.thrust_limit.value();
        if !(thrust > 0.0) {
            return Err(Error::Config(format!("thrust_limit must be positive, got {thrust}")));
        }
        if self.robots.is_empty() {
            return Err(Error::Config("at least one robot is required".into()));
        }
        let p = self.position_dim();
        for (k, r) in self.robots.iter().enumerate() {
            let vel_len = r.velocity.as_ref().map_or(p, Vec::len);
            if r.position.len() != p || r.goal.len() != p || vel_len != p {
                return Err(Error::Config(format!(
                    "robot {k}: position, velocity and goal need {p} components"
                )));
            }
            if !(r.control_weight.is_finite() && r.control_weight >= 0.0) {
                return Err(Error::Config(format!("robot {k}: control_weight must be >= 0")));
            }
        }
        let pairs = self.robot_pairs()?;
        for theta in std::iter::once(&self.theta).chain(self.initial_guess.as_ref()) {
            check_theta(theta, &pairs)?;
        }
        let e = &self.experiment;
        if e.noise_levels.iter().any(|q| !(q.value() >= 0.0))
            || e.velocity_sigmas.iter().any(|q| !(q.value() >= 0.0))
        {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        self.solver.validate()?;
        Ok(())
    }

    pub fn orbit_constants(&self) -> Result<OrbitConstants> {
        let c = OrbitConstants {
            gravitational_parameter: self.orbit.gravitational_parameter.value(),
            earth_radius: self.orbit.earth_radius.value(),
            orbital_altitude: self.orbit.altitude.value(),
            satellite_mass: self.orbit.satellite_mass.value(),
            dt: self.horizon.dt.value(),
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    /// Number of knot points, `total_time / dt`, which must be a whole number.
    pub fn horizon_steps(&self) -> Result<usize> {
        let (dt, total) = (self.horizon.dt.value(), self.horizon.total_time.value());
        if !(dt > 0.0 && total > 0.0) {
            return Err(Error::Config("dt and total_time must be positive".into()));
        }
        let ratio = total / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 2.0 {
            return Err(Error::Config(format!(
                "total_time / dt = {ratio} must be a whole number of at least 2"
            )));
        }
        Ok(steps as usize)
    }

    pub fn robot_pairs(&self) -> Result<Vec<RobotPair>> {
        let n = self.robots.len();
        match &self.pairs {
            PairSelection::All(_) => Ok(all_pairs(n)),
            PairSelection::List(list) => {
                let mut out: Vec<RobotPair> = Vec::with_capacity(list.len());
                for &[i, j] in list {
                    if i == j || i >= n || j >= n {
                        return Err(Error::Config(format!("invalid pair [{i}, {j}] for {n} robots")));
                    }
                    let pair = RobotPair::new(i, j);
                    if out.contains(&pair) {
                        return Err(Error::Config(format!("pair [{i}, {j}] listed twice")));
                    }
                    out.push(pair);
                }
                Ok(out)
            }
        }
    }

    pub fn game_spec(&self) -> Result<GameSpec> {
        let full = hcw_matrices(&self.orbit_constants()?)?;
        let dynamics = match self.spatial_mode {
            SpatialMode::Planar => planar_from_full(&full)?,
            SpatialMode::Full3d => full,
        };
        let p = self.position_dim();
        let n = self.robots.len();
        let mut x0 = DVector::zeros(n * 2 * p);
        let mut goals = DMatrix::zeros(n, p);
        for (i, r) in self.robots.iter().enumerate() {
            for k in 0..p {
                x0[i * 2 * p + k] = r.position[k].value();
                x0[i * 2 * p + p + k] = r.velocity.as_ref().map_or(0.0, |v| v[k].value());
                goals[(i, k)] = r.goal[k].value();
            }
        }
        GameSpec::new(
            dynamics,
            self.horizon_steps()?,
            self.horizon.dt.value(),
            x0,
            goals,
            self.robots.iter().map(|r| r.control_weight).collect(),
            self.thrust_limit.value(),
            self.robot_pairs()?,
        )
    }

    pub fn theta_truth(&self) -> Result<ThetaParams> {
        self.build_theta(&self.theta)
    }

    pub fn theta_initial(&self) -> Result<ThetaParams> {
        self.build_theta(self.initial_guess.as_ref().unwrap_or(&self.theta))
    }

    fn build_theta(&self, config: &ThetaConfig) -> Result<ThetaParams> {
        let pairs = self.robot_pairs()?;
        let mut values = vec![
            PairParams {
                omega: config.omega.value(),
                rho: config.rho.value(),
            };
            pairs.len()
        ];
        for o in &config.per_pair {
            let k = pairs
                .iter()
                .position(|&p| p == RobotPair::new(o.pair[0], o.pair[1]))
                .ok_or_else(|| Error::Config(format!("override for unknown pair {:?}", o.pair)))?;
            values[k] = PairParams {
                omega: o.omega.value(),
                rho: o.rho.value(),
            };
        }
        let l = &self.learnable;
        let mut learnable = Vec::new();
        let mut add = |kind: ParamKind, count: usize| {
            if l.tied && count > 0 {
                learnable.push(LearnableParam {
                    kind,
                    targets: (0..count).collect(),
                });
            } else {
                learnable.extend((0..count).map(|k| LearnableParam {
                    kind,
                    targets: vec![k],
                }));
            }
        };
        if l.omega {
            add(ParamKind::Omega, pairs.len());
        }
        if l.rho {
            add(ParamKind::Rho, pairs.len());
        }
        if l.control_weights {
            add(ParamKind::Xi, self.robots.len());
        }
        // Pair-major order keeps the common untied case as (ω₀, ρ₀, ω₁, ρ₁, ...).
        if !l.tied {
            learnable.sort_by_key(|p| (p.kind == ParamKind::Xi, p.targets[0], p.kind == ParamKind::Rho));
        }
        Ok(ThetaParams {
            pairs: values,
            control_weights: None,
            learnable,
        })
    }

    pub fn solve_options(&self) -> SolveOptions {
        self.solver.clone()
    }

    pub fn learn_options(&self) -> LearnOptions {
        let l = &self.learner;
        LearnOptions {
            max_iterations: l.max_iterations,
            gradient_tol: l.gradient_tol,
            learning_rates: l.learning_rates.clone(),
            beta1: l.beta1,
            beta2: l.beta2,
            epsilon_hat: l.epsilon_hat,
            retreat_attempts: l.retreat_attempts,
            loss_target: l.loss_target,
            solver: self.solver.clone(),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let e = &self.experiment;
        SweepConfig {
            levels: e.noise_levels.iter().map(Quantity::value).collect(),
            trials_per_level: e.trials_per_level,
            base_seed: self.seed,
            target: e.noise_target,
            threads: e.threads,
        }
    }

    pub fn velocity_sigmas(&self) -> Vec<f64> {
        self.experiment.velocity_sigmas.iter().map(Quantity::value).collect()
    }
}

fn check_theta(theta: &ThetaConfig, pairs: &[RobotPair]) -> Result<()> {
    let positive = |rho: f64, what: &str| {
        if rho > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: rho must be positive, got {rho}")))
        }
    };
    positive(theta.rho.value(), "theta")?;
    for o in &theta.per_pair {
        positive(o.rho.value(), "per_pair override")?;
        if !pairs.contains(&RobotPair::new(o.pair[0], o.pair[1])) || o.pair[0] == o.pair[1] {
            return Err(Error::Config(format!("override for pair {:?} not in the game", o.pair)));
        }
    }
    Ok(())
}
