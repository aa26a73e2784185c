mod common;

use hypergame::game::{feasibility_report, PairParams};
use hypergame::harness::{
    aggregate, corrupt, generate_expert, multi_robot_generalization, noise_sweep,
    reconstruction_error, reconstruction_error_between, velocity_sensitivity_sweep, NoiseModel,
    NoiseTarget, SweepConfig,
};
use hypergame::nalgebra::{DMatrix, DVector};
use hypergame::sensitivity::{implicit_residual, loss_gradient, trajectory_loss, LossTarget, SensitivityMethod};
use hypergame::{
    best_response_check, learn_parameters, solution_sensitivity, solve_mcp, Error, GameSpec,
    LearnOptions, ScenarioConfig, SolveOptions, ThetaParams, Trajectory,
};

fn three_robot_config(tied: bool) -> ScenarioConfig {
    let text = format!(
        r#"{{
  "orbit": {{ "altitude": "400 km", "satellite_mass": "100 kg" }},
  "horizon": {{ "dt": "5 s", "total_time": "120 s" }},
  "thrust_limit": "1 N",
  "robots": [
    {{ "position": [0, 80], "goal": [0, -80], "control_weight": 1e-4 }},
    {{ "position": [-69.282, -40], "goal": [69.282, 40], "control_weight": 1e-4 }},
    {{ "position": [69.282, -40], "goal": [-69.282, 40], "control_weight": 1e-4 }}
  ],
  "pairs": "all",
  "theta": {{ "omega": "0.02 rad/s", "rho": "25 m" }},
  "learnable": {{ "tied": {tied} }}
}}"#
    );
    ScenarioConfig::from_json(&text).unwrap()
}

#[test]
fn sensitivity_satisfies_implicit_function_identity() {
    let (spec, truth, _) = common::table();
    let res = solve_mcp(&spec, &truth, &SolveOptions::default(), None).unwrap();
    let sens = solution_sensitivity(&spec, &truth, &res).unwrap();
    assert_eq!(sens.method, SensitivityMethod::Direct);
    assert_eq!(sens.dz_dtheta.ncols(), 2);
    let r = implicit_residual(&spec, &truth, &res, &sens).unwrap();
    assert!(r <= 1e-8, "implicit residual {r:.2e}");
}

#[test]
fn loss_gradient_vanishes_at_truth_with_clean_expert() {
    let (spec, truth, _) = common::table();
    let (expert, res) = generate_expert(&spec, &truth, &SolveOptions::default()).unwrap();
    let sens = solution_sensitivity(&spec, &truth, &res).unwrap();
    let g = loss_gradient(&spec, &res, &sens, &expert, LossTarget::FullState).unwrap();
    assert!(g.norm() <= 1e-4, "{g}");
}

#[test]
fn tied_parameters_sum_untied_columns() {
    let untied_cfg = three_robot_config(false);
    let tied_cfg = three_robot_config(true);
    let spec = untied_cfg.game_spec().unwrap();
    let untied = untied_cfg.theta_truth().unwrap();
    let tied = tied_cfg.theta_truth().unwrap();
    assert_eq!((untied.learnable.len(), tied.learnable.len()), (6, 2));
    let res = solve_mcp(&spec, &untied, &SolveOptions::default(), None).unwrap();
    assert!(res.converged());
    let su = solution_sensitivity(&spec, &untied, &res).unwrap();
    let st = solution_sensitivity(&spec, &tied, &res).unwrap();
    let omega_sum = su.dz_dtheta.column(0) + su.dz_dtheta.column(2) + su.dz_dtheta.column(4);
    let rho_sum = su.dz_dtheta.column(1) + su.dz_dtheta.column(3) + su.dz_dtheta.column(5);
    let scale = su.dz_dtheta.amax().max(1.0);
    assert!((st.dz_dtheta.column(0) - omega_sum).amax() <= 1e-8 * scale);
    assert!((st.dz_dtheta.column(1) - rho_sum).amax() <= 1e-8 * scale);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let (spec, truth, theta0) = common::table();
    let opts = SolveOptions::default();
    let (expert, _) = generate_expert(&spec, &truth, &opts).unwrap();
    let base = solve_mcp(&spec, &theta0, &opts, None).unwrap();
    let sens = solution_sensitivity(&spec, &theta0, &base).unwrap();
    let analytic = loss_gradient(&spec, &base, &sens, &expert, LossTarget::FullState).unwrap();

    let loss_at = |internal: &[f64]| -> f64 {
        let mut theta = theta0.clone();
        theta.set_internal(&spec, internal).unwrap();
        let res = solve_mcp(&spec, &theta, &opts, Some(&base)).unwrap();
        assert!(res.converged());
        trajectory_loss(&spec, &res.trajectory(&spec).unwrap(), &expert, LossTarget::FullState).unwrap()
    };
    let x0 = theta0.internal_vector(&spec);
    let steps = [1e-6, 1e-5];
    let mut fd = DVector::zeros(2);
    for k in 0..2 {
        let (mut plus, mut minus) = (x0.clone(), x0.clone());
        plus[k] += steps[k];
        minus[k] -= steps[k];
        fd[k] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * steps[k]);
    }
    for k in 0..2 {
        let err = (analytic[k] - fd[k]).abs() / fd[k].abs().max(1e-8);
        assert!(err <= 1e-2, "component {k}: analytic {} vs fd {} (rel {err:.2e})", analytic[k], fd[k]);
    }
}

#[test]
fn learning_from_truth_is_a_fixed_point() {
    let (spec, truth, _) = common::table();
    let (expert, _) = generate_expert(&spec, &truth, &SolveOptions::default()).unwrap();
    let out = learn_parameters(&spec, &truth, &expert, &LearnOptions::default()).unwrap();
    assert!(out.trace.stationary_at_start());
    let moved = (out.theta.pairs[0].omega - 0.015).abs().max((out.theta.pairs[0].rho - 30.0).abs());
    assert!(moved <= 1e-6);
}

#[test]
fn never_active_constraints_leave_learner_stationary() {
    let dynamics = ScenarioConfig::table().game_spec().unwrap().dynamics().clone();
    let spec = GameSpec::new(
        dynamics,
        20,
        5.0,
        DVector::from_vec(vec![0.0, 500.0, 0.0, 0.0, 0.0, -500.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[50.0, 520.0, -50.0, -520.0]),
        vec![1e-4; 2],
        1.0,
        vec![hypergame::RobotPair::new(0, 1)],
    )
    .unwrap();
    let theta0 = ThetaParams::uniform(1, 0.01, 20.0);
    let (clean, _) = generate_expert(&spec, &theta0, &SolveOptions::default()).unwrap();
    let noise = NoiseModel {
        sigma: 3.0,
        seed: 11,
        target: NoiseTarget::FullState,
    };
    let expert = corrupt(&clean, &noise, 2).unwrap();
    let out = learn_parameters(&spec, &theta0, &expert, &LearnOptions::default()).unwrap();
    assert!(out.trace.stationary_at_start());
    assert_eq!(out.trace.records[0].gradient_norm, Some(0.0));
}

#[test]
fn short_learning_run_improves_and_reports_natural_units() {
    let (spec, truth, theta0) = common::table();
    let (expert, _) = generate_expert(&spec, &truth, &SolveOptions::default()).unwrap();
    let options = LearnOptions {
        max_iterations: 6,
        ..LearnOptions::default()
    };
    let out = learn_parameters(&spec, &theta0, &expert, &options).unwrap();
    let best = out.trace.best_so_far();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert!(best.last().unwrap() < &out.trace.records[0].loss.unwrap());
    assert_eq!(out.trace.records[0].theta, vec![0.008, 10.0]);
    let record = &out.trace.records[out.trace.best_record];
    assert_eq!(record.theta, vec![out.theta.pairs[0].omega, out.theta.pairs[0].rho]);
    assert!(out.equilibrium.converged());
}

#[test]
fn corrupted_control_shows_best_response_improvement() {
    let (spec, truth, _) = common::table();
    let opts = SolveOptions::default();
    let res = solve_mcp(&spec, &truth, &opts, None).unwrap();
    let clean = best_response_check(&spec, &truth, &res, 0, &opts).unwrap();
    let j = clean.equilibrium_cost;
    assert!(clean.improvement.unwrap() <= 1e-4 * (1.0 + j.abs()));

    // A feasible but suboptimal profile: scale one unsaturated control of
    // robot 0 by 10% where the re-propagated trajectory still clears the
    // hyperplane.
    let traj = res.trajectory(&spec).unwrap();
    let corrupted = (0..spec.horizon() - 1)
        .flat_map(|t| (0..2).map(move |c| (t, c)))
        .filter(|&(t, c)| {
            let u = traj.control(t, 0)[c];
            u.abs() > 0.05 && u.abs() < 0.5
        })
        .map(|(t, c)| {
            let mut z = res.clone();
            z.z[res.layout.u_index(0, t) + c] *= 1.1;
            z
        })
        .find(|z| {
            let controls = z.trajectory(&spec).unwrap().controls().clone();
            let replayed = Trajectory::from_controls(&spec, controls).unwrap();
            feasibility_report(&spec, &truth, &replayed).unwrap().min_hyperplane_overall() >= 0.0
        })
        .expect("a feasible perturbation");
    let br = best_response_check(&spec, &truth, &corrupted, 0, &opts).unwrap();
    assert!(br.improvement.unwrap() > 1e-6 * (1.0 + br.equilibrium_cost.abs()), "{br:?}");
    assert!(br.improvement.unwrap() > 1e3 * clean.improvement.unwrap().abs());
}

#[test]
fn table_equilibrium_touches_the_hyperplane() {
    let (spec, truth, _) = common::table();
    let (expert, _) = generate_expert(&spec, &truth, &SolveOptions::default()).unwrap();
    let report = feasibility_report(&spec, &truth, &expert).unwrap();
    assert!(report.min_hyperplane[0] >= -1e-8);
    assert!(report.min_hyperplane[0] < 1e-3 * 30.0);
    assert!(report.min_pair_distance >= 30.0 - 1e-3);
}

#[test]
fn corruption_statistics() {
    let (spec, truth, _) = common::table();
    let (expert, _) = generate_expert(&spec, &truth, &SolveOptions::default()).unwrap();
    let sigma = 5.0;
    let zero = NoiseModel {
        sigma: 0.0,
        seed: 1,
        target: NoiseTarget::FullState,
    };
    assert_eq!(corrupt(&expert, &zero, 2).unwrap(), expert);

    let mut diffs = Vec::new();
    for seed in 0..10 {
        let noisy = corrupt(&expert, &NoiseModel { sigma, seed, target: NoiseTarget::FullState }, 2).unwrap();
        assert_eq!(noisy.controls(), expert.controls());
        diffs.extend((noisy.states() - expert.states()).iter().copied());
    }
    assert!(diffs.len() >= 3000);
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / (sigma * sigma) - 1.0).abs() <= 0.2, "variance {var}");

    let a = corrupt(&expert, &NoiseModel { sigma, seed: 1, target: NoiseTarget::FullState }, 2).unwrap();
    let b = corrupt(&expert, &NoiseModel { sigma, seed: 2, target: NoiseTarget::FullState }, 2).unwrap();
    assert_ne!(a, b);

    let p = corrupt(&expert, &NoiseModel { sigma, seed: 3, target: NoiseTarget::PositionsOnly }, 2).unwrap();
    for i in 0..2 {
        let (noisy, clean) = (p.robot_states(i), expert.robot_states(i));
        assert_eq!(noisy.columns(2, 2), clean.columns(2, 2));
        assert_ne!(noisy.columns(0, 2), clean.columns(0, 2));
    }
}

#[test]
fn reconstruction_error_basics() {
    let (spec, truth, _) = common::table();
    let opts = SolveOptions::default();
    assert_eq!(reconstruction_error(&spec, &truth, &truth, &opts).unwrap(), 0.0);

    let mut other = truth.clone();
    other.pairs[0] = PairParams { omega: 0.012, rho: 25.0 };
    let a = solve_mcp(&spec, &truth, &opts, None).unwrap().trajectory(&spec).unwrap();
    let b = solve_mcp(&spec, &other, &opts, None).unwrap().trajectory(&spec).unwrap();
    let d = reconstruction_error_between(&spec, &a, &b).unwrap();
    assert!(d > 0.0);
    assert_eq!(d, reconstruction_error(&spec, &truth, &other, &opts).unwrap());

    let swap = |t: &Trajectory| {
        let states = DMatrix::from_fn(t.horizon(), 8, |r, c| t.states()[(r, (c + 4) % 8)]);
        let controls = DMatrix::from_fn(t.horizon() - 1, 4, |r, c| t.controls()[(r, (c + 2) % 4)]);
        Trajectory::new(2, 4, 2, states, controls).unwrap()
    };
    let swapped = reconstruction_error_between(&spec, &swap(&a), &swap(&b)).unwrap();
    assert!((swapped - d).abs() <= 1e-12 * d);
}

#[test]
fn small_sweep_bookkeeping() {
    let (spec, truth, theta0) = common::table();
    let learn = LearnOptions {
        max_iterations: 2,
        ..LearnOptions::default()
    };
    let config = SweepConfig {
        levels: vec![0.0, 5.0],
        trials_per_level: 2,
        base_seed: 99,
        target: NoiseTarget::FullState,
        threads: 2,
    };
    let sweep = noise_sweep(&spec, &truth, &theta0, &config, &learn).unwrap();
    assert_eq!(sweep.trials.len(), 4);
    for level in 0..2 {
        assert_eq!(sweep.trials.iter().filter(|t| t.level == level).count(), 2);
    }
    let clean: Vec<_> = sweep.trials.iter().filter(|t| t.level == 0).collect();
    assert_eq!(clean[0].theta_hat, clean[1].theta_hat);
    assert_eq!(clean[0].reconstruction_error, clean[1].reconstruction_error);
    assert_eq!(aggregate(&config.levels, &sweep.trials, 2), sweep.aggregates);

    let single = noise_sweep(
        &spec,
        &truth,
        &theta0,
        &SweepConfig {
            trials_per_level: 1,
            threads: 1,
            ..config.clone()
        },
        &learn,
    )
    .unwrap();
    for t in &single.trials {
        let same = sweep
            .trials
            .iter()
            .find(|s| s.level == t.level && s.trial == t.trial)
            .unwrap();
        assert_eq!((same.seed, &same.theta_hat, same.reconstruction_error), (t.seed, &t.theta_hat, t.reconstruction_error));
    }
}

#[test]
fn multi_robot_outcomes() {
    let (spec, truth, _) = common::table();
    let opts = SolveOptions::default();
    let outcome = multi_robot_generalization(truth.pairs[0], &spec, &opts).unwrap();
    assert!(outcome.collision_free());
    let direct = solve_mcp(&spec, &truth, &opts, None).unwrap();
    assert_eq!(outcome.solution.unwrap().z, direct.z);

    let six = ScenarioConfig::six_robot().game_spec().unwrap();
    let too_big = PairParams { omega: 0.015, rho: 150.0 };
    let failed = multi_robot_generalization(too_big, &six, &opts).unwrap();
    assert!(!failed.collision_free());
    assert!(failed.error.unwrap().contains("infeasible geometry"));
}

#[test]
fn velocity_sweep_contract() {
    let (spec, truth, _) = common::table();
    let opts = SolveOptions::default();
    let levels = velocity_sensitivity_sweep(&spec, &truth, &[0.0], 4, 5, &opts, 1).unwrap();
    assert_eq!(levels[0].success_rate, 1.0);

    let mut x0 = spec.initial_state().clone();
    x0[2] = 0.1;
    let moving = spec.with_initial_state(x0).unwrap();
    assert!(matches!(
        velocity_sensitivity_sweep(&moving, &truth, &[0.0], 1, 5, &opts, 1),
        Err(Error::Precondition(_))
    ));
}
