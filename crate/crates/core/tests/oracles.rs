mod common;

use common::{hcw_ode, inf_norm, qp_oracle, zoh};
use hypergame::dynamics::{hcw_from_mean_motion, out_of_plane_from_full, planar_from_full};
use hypergame::game::feasibility_report;
use hypergame::harness::{embed_3d, OutOfPlaneProfile};
use hypergame::nalgebra::{DMatrix, DVector};
use hypergame::{hcw_matrices, solve_mcp, GameSpec, OrbitConstants, SolveOptions, ThetaParams};
use proptest::prelude::*;

fn no_pairs() -> ThetaParams {
    ThetaParams {
        pairs: Vec::new(),
        control_weights: None,
        learnable: Vec::new(),
    }
}

fn assert_matches_exponential(c: &OrbitConstants) {
    let dynamics = hcw_matrices(c).unwrap();
    let (ac, bc) = hcw_ode(c.mean_motion(), c.satellite_mass);
    let (a, b) = zoh(&ac, &bc, c.dt);
    let ea = inf_norm(&(dynamics.a() - &a)) / inf_norm(&a);
    let eb = inf_norm(&(dynamics.b() - &b)) / inf_norm(&b);
    assert!(ea <= 1e-9 && eb <= 1e-9, "{c:?}: A err {ea:.2e}, B err {eb:.2e}");
}

#[test]
fn table_constants_match_matrix_exponential() {
    assert_matches_exponential(&OrbitConstants::earth(400e3, 100.0, 5.0).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_constants_match_matrix_exponential(
        altitude in 150e3..40_000e3f64,
        mass in 1.0..5000.0f64,
        dt in 0.05..120.0f64,
    ) {
        assert_matches_exponential(&OrbitConstants::earth(altitude, mass, dt).unwrap());
    }

    #[test]
    fn doubling_the_step_squares_the_transition(altitude in 200e3..2000e3f64, dt in 0.1..60.0f64) {
        let one = hcw_matrices(&OrbitConstants::earth(altitude, 100.0, dt).unwrap()).unwrap();
        let two = hcw_matrices(&OrbitConstants::earth(altitude, 100.0, 2.0 * dt).unwrap()).unwrap();
        let sq = one.a() * one.a();
        prop_assert!(inf_norm(&(two.a() - &sq)) <= 1e-9 * inf_norm(two.a()));
    }
}

fn decoupled_spec(full_3d: bool, n: f64, positions: &[[f64; 3]], goals: &[[f64; 3]], xi: f64) -> GameSpec {
    let full = hcw_from_mean_motion(n, 5.0, 100.0).unwrap();
    let (dynamics, p) = if full_3d { (full, 3) } else { (planar_from_full(&full).unwrap(), 2) };
    let robots = positions.len();
    let mut x0 = DVector::zeros(robots * 2 * p);
    let mut g = DMatrix::zeros(robots, p);
    for i in 0..robots {
        for k in 0..p {
            x0[i * 2 * p + k] = positions[i][k];
            g[(i, k)] = goals[i][k];
        }
    }
    GameSpec::new(dynamics, 20, 5.0, x0, g, vec![xi; robots], 100.0, Vec::new()).unwrap()
}

fn assert_matches_qp(spec: &GameSpec) {
    let res = solve_mcp(spec, &no_pairs(), &SolveOptions::default(), None).unwrap();
    assert!(res.converged(), "{:?}", res.status);
    let traj = res.trajectory(spec).unwrap();
    let a = spec.dynamics().a().clone();
    let b = spec.dynamics().b().clone();
    for i in 0..spec.num_robots() {
        let (states, controls) = qp_oracle(
            &a,
            &b,
            spec.position_dim(),
            &spec.initial_robot_state(i).into_owned(),
            &spec.goal(i).into_owned(),
            spec.control_weights()[i],
            spec.horizon(),
        );
        assert!(controls.amax() < spec.thrust_limit(), "oracle assumes inactive bounds");
        let err = (traj.robot_states(i) - states).amax();
        assert!(err <= 1e-6, "robot {i}: state error {err:.2e}");
    }
}

#[test]
fn decoupled_planar_game_matches_qp_oracle() {
    let spec = decoupled_spec(
        false,
        1.1332e-3,
        &[[0.0, 100.0, 0.0], [-100.0, 0.0, 0.0], [40.0, -30.0, 0.0]],
        &[[0.0, -100.0, 0.0], [100.0, 0.0, 0.0], [-20.0, 60.0, 0.0]],
        1e-4,
    );
    assert_matches_qp(&spec);
}

#[test]
fn decoupled_3d_game_matches_qp_oracle() {
    let spec = decoupled_spec(
        true,
        1.1332e-3,
        &[[0.0, 100.0, 10.0], [-100.0, 0.0, -5.0]],
        &[[0.0, -100.0, 0.0], [100.0, 0.0, 20.0]],
        1e-3,
    );
    assert_matches_qp(&spec);
}

#[test]
fn single_robot_near_double_integrator_matches_qp_oracle() {
    let spec = decoupled_spec(false, 1e-9, &[[5.0, -3.0, 0.0]], &[[50.0, 20.0, 0.0]], 1e-2);
    assert_matches_qp(&spec);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_decoupled_games_match_qp_oracle(
        pts in proptest::collection::vec((-150.0..150.0f64, -150.0..150.0f64), 4),
        log_xi in -4.0..0.0f64,
    ) {
        let spec = decoupled_spec(
            false,
            1.1332e-3,
            &[[pts[0].0, pts[0].1, 0.0], [pts[1].0, pts[1].1, 0.0]],
            &[[pts[2].0, pts[2].1, 0.0], [pts[3].0, pts[3].1, 0.0]],
            10f64.powf(log_xi),
        );
        assert_matches_qp(&spec);
    }
}

fn table_planar() -> (GameSpec, hypergame::Trajectory, ThetaParams) {
    let (spec, truth, _) = common::table();
    let res = solve_mcp(&spec, &truth, &SolveOptions::default(), None).unwrap();
    let traj = res.trajectory(&spec).unwrap();
    (spec, traj, truth)
}

#[test]
fn embedding_with_zero_out_of_plane_keeps_plane() {
    let (spec, traj, _) = table_planar();
    let full = hcw_from_mean_motion(1.1332e-3, 5.0, 100.0).unwrap();
    let axis = out_of_plane_from_full(&full).unwrap();
    let embedded = embed_3d(&spec, &traj, &axis, &OutOfPlaneProfile::zeros(2), &SolveOptions::default()).unwrap();
    for i in 0..2 {
        let s = embedded.robot_states(i);
        assert!(s.column(2).iter().chain(s.column(5).iter()).all(|&v| v == 0.0));
        assert_eq!(s.column(0), traj.robot_states(i).column(0));
        assert_eq!(s.column(4), traj.robot_states(i).column(3));
    }
}

#[test]
fn embedded_out_of_plane_motion_matches_axis_oracle() {
    let (spec, traj, _) = table_planar();
    let constants = OrbitConstants::earth(400e3, 100.0, 5.0).unwrap();
    let full = hcw_matrices(&constants).unwrap();
    let axis = out_of_plane_from_full(&full).unwrap();
    let profile = OutOfPlaneProfile {
        initial: vec![[10.0, 0.0], [-4.0, 0.05]],
        goals: vec![-15.0, 25.0],
    };
    let embedded = embed_3d(&spec, &traj, &axis, &profile, &SolveOptions::default()).unwrap();
    for i in 0..2 {
        let (states, _) = qp_oracle(
            axis.a(),
            axis.b(),
            1,
            &DVector::from_row_slice(&profile.initial[i]),
            &DVector::from_element(1, profile.goals[i]),
            spec.control_weights()[i],
            spec.horizon(),
        );
        let s = embedded.robot_states(i);
        let err = (s.column(2) - states.column(0)).amax().max((s.column(5) - states.column(1)).amax());
        assert!(err <= 1e-6, "robot {i}: out-of-plane error {err:.2e}");
    }
    let mut worst: f64 = 0.0;
    for t in 0..spec.horizon() - 1 {
        for i in 0..2 {
            let next = full.step(&embedded.state(t, i), &embedded.control(t, i));
            worst = worst.max((next - embedded.state(t + 1, i)).amax());
        }
    }
    assert!(worst <= 1e-8, "3D dynamics residual {worst:.2e}");
}

#[test]
fn planar_constraints_hold_in_full_3d_game() {
    let cfg = hypergame::ScenarioConfig::from_json(
        &hypergame::scenario::TABLE_SCENARIO_JSON
            .replace("\"planar\"", "\"full3d\"")
            .replace("[\"0 m\", \"100 m\"]", "[\"0 m\", \"100 m\", \"5 m\"]")
            .replace("[\"-100 m\", \"0 m\"]", "[\"-100 m\", \"0 m\", \"0 m\"]")
            .replace("[\"0 m\", \"-100 m\"]", "[\"0 m\", \"-100 m\", \"-5 m\"]")
            .replace("[\"100 m\", \"0 m\"]", "[\"100 m\", \"0 m\", \"10 m\"]"),
    )
    .unwrap();
    let spec = cfg.game_spec().unwrap();
    assert_eq!(spec.state_dim(), 6);
    let theta = cfg.theta_truth().unwrap();
    let res = solve_mcp(&spec, &theta, &SolveOptions::default(), None).unwrap();
    assert!(res.converged());
    let report = feasibility_report(&spec, &theta, &res.trajectory(&spec).unwrap()).unwrap();
    assert!(report.passes_certificate(), "{report:?}");
}
