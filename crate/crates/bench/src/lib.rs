//! Shared fixtures for the benchmarks.

use hypergame::{GameSpec, ScenarioConfig, SolveOptions, SolveResult, ThetaParams};

pub struct Fixture {
    pub spec: GameSpec,
    pub truth: ThetaParams,
    pub options: SolveOptions,
}

impl Fixture {
    pub fn load(cfg: &ScenarioConfig) -> Self {
        Fixture {
            spec: cfg.game_spec().expect("bundled scenario is valid"),
            truth: cfg.theta_truth().expect("bundled scenario is valid"),
            options: cfg.solve_options(),
        }
    }

    pub fn table() -> Self {
        Self::load(&ScenarioConfig::table())
    }

    pub fn six_robot() -> Self {
        Self::load(&ScenarioConfig::six_robot())
    }

    pub fn solve(&self) -> SolveResult {
        hypergame::solve_mcp(&self.spec, &self.truth, &self.options, None).expect("solve runs")
    }
}
