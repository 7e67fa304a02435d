use graphon_lq::config::{ModelConfig, ProblemConfig, ScalarProfile};
use graphon_lq::simulator::{
    estimate_cost, fundamental_relation_residual, nested_conditional_mean, paired_difference,
    propagate_conditional_mean, simulate_paths, simulate_policies, ControlPolicy,
    SimulationOptions,
};
use graphon_lq::{solve_backward, ProblemSpec, RiccatiSolution, SolverOptions, VectorField};
use nalgebra::DVector;

fn setup(cfg: &ProblemConfig) -> (ProblemSpec, RiccatiSolution) {
    let spec = cfg.build().unwrap();
    let sol = solve_backward(&spec, cfg.solver.options()).unwrap();
    (spec, sol)
}

fn preset(name: &str, labels: usize, dt: f64) -> ProblemConfig {
    let mut cfg = ProblemConfig::preset(name).unwrap();
    cfg.labels = labels;
    cfg.set_dt(dt);
    cfg
}

fn unit_delta(spec: &ProblemSpec) -> Vec<VectorField> {
    vec![VectorField::constant(
        spec.grid,
        DVector::from_element(spec.control_dim, 1.0),
    )]
}

#[test]
fn deterministic_cost_converges_to_value_at_first_order() {
    let gap = |dt: f64| {
        let mut cfg = preset("systemic-sbm", 8, dt);
        let ModelConfig::Systemic(s) = &mut cfg.model else {
            panic!()
        };
        s.sigma = ScalarProfile::Constant(0.0);
        s.xi_var = ScalarProfile::Constant(0.0);
        let (spec, sol) = setup(&cfg);
        let ens = simulate_policies(
            &spec,
            Some(&sol),
            &[ControlPolicy::Feedback],
            1,
            1,
            0,
            SimulationOptions::default(),
        )
        .unwrap()
        .remove(0);
        let est = estimate_cost(&spec, &ens).unwrap();
        assert_eq!(est.std_error, 0.0);
        est.mean - sol.initial_value(&spec).unwrap()
    };
    let g: Vec<f64> = [0.02, 0.01, 0.005].iter().map(|&dt| gap(dt)).collect();
    for w in g.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.4).contains(&ratio), "{g:?}");
    }
    assert!(g[2].abs() < 1e-2);
}

#[test]
fn zero_perturbation_reproduces_the_feedback_bitwise() {
    let cfg = preset("trading-step", 6, 0.02);
    let (spec, sol) = setup(&cfg);
    let policies = [
        ControlPolicy::Feedback,
        ControlPolicy::PerturbedFeedback {
            eps: 0.0,
            delta: unit_delta(&spec),
        },
    ];
    let ens = simulate_policies(
        &spec,
        Some(&sol),
        &policies,
        20,
        3,
        11,
        SimulationOptions::default(),
    )
    .unwrap();
    assert_eq!(ens[0].common_costs, ens[1].common_costs);
    assert_eq!(ens[0].sample_costs, ens[1].sample_costs);
    assert_eq!(paired_difference(&ens[1], &ens[0]), (0.0, 0.0));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let cfg = preset("systemic-sbm", 8, 0.02);
    let (spec, sol) = setup(&cfg);
    let delta = unit_delta(&spec);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fundamental_relation_residual(&spec, &sol, &delta, 0.1, 64, 4, 99).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(3));
    assert_eq!(a, run(8));
    assert_ne!(
        a,
        fundamental_relation_residual(&spec, &sol, &delta, 0.1, 64, 4, 100).unwrap()
    );
}

#[test]
fn recorded_conditional_mean_matches_propagation() {
    let cfg = preset("trading-step", 4, 0.02);
    let (spec, sol) = setup(&cfg);
    let ens = simulate_paths(&spec, Some(&sol), &ControlPolicy::Feedback, 3, 2, 5).unwrap();
    let paths = ens.paths.as_ref().unwrap();
    for c in 0..3 {
        let xbar = propagate_conditional_mean(
            &spec,
            Some(&sol),
            &ControlPolicy::Feedback,
            &paths.common_increments[c],
        )
        .unwrap();
        for (knot, xb) in xbar.iter().enumerate() {
            assert_eq!(ens.xbar_at(c, knot).unwrap().values(), xb.values());
        }
    }
}

#[test]
fn nested_average_tracks_the_conditional_mean() {
    let cfg = preset("systemic-sbm", 4, 0.02);
    let (spec, sol) = setup(&cfg);
    let check =
        nested_conditional_mean(&spec, Some(&sol), &ControlPolicy::Feedback, 4000, 17).unwrap();
    assert!(check.max_z.is_finite());
    // 4 labels × 51 knots; a 4.5σ bound keeps the family-wise false alarm rate small.
    assert!(check.max_z < 4.5, "max z {}", check.max_z);
}

#[test]
fn heterogeneous_trading_satisfies_the_optimality_relation() {
    let cfg = preset("trading-step", 16, 0.0025);
    let (spec, sol) = setup(&cfg);
    let rep =
        fundamental_relation_residual(&spec, &sol, &unit_delta(&spec), 0.1, 500, 10, 2024).unwrap();
    assert!(rep.residual_a.abs() <= 3.0 * rep.se_a, "{rep:?}");
    assert!(rep.residual_b_crn.abs() <= 3.0 * rep.se_b_crn, "{rep:?}");
    assert!(rep.residual_c.abs() <= 3.0 * rep.se_c, "{rep:?}");
    assert!(rep.pass);
    assert!(rep.j_plus > rep.j_hat && rep.j_minus > rep.j_hat);
}

#[test]
fn solver_options_default_to_rk4() {
    let o = SolverOptions::default();
    assert_eq!(o.scheme, graphon_lq::Scheme::Rk4);
}

/// Two-dimensional state, one control, every coefficient family switched on.
const GENERAL: &str = r#"{
    "name": "general-2d",
    "labels": 4,
    "time": {"t_end": 1.0, "dt": 0.0025},
    "model": {"kind": "general", "state_dim": 2, "control_dim": 1,
        "drift": {"a": [[-0.5, 0.2], [0.1, -0.3]], "b": [[1.0], [0.5]], "beta": [0.3, -0.2],
                  "g_a": {"kind": "min", "block": [[0.2, 0.0], [0.1, 0.2]]}},
        "diffusion": {"c": [[0.1, 0.0], [0.0, 0.1]], "d": [[0.2], [0.0]], "gamma": [0.2, 0.1],
                      "g_c": {"kind": "exp", "length": 0.5, "block": [[0.1, 0.0], [0.0, 0.1]]},
                      "theta": [0.1, 0.2]},
        "cost": {"q": [[1.0, 0.2], [0.2, 0.5]], "r": [[1.0]], "i_off": [0.4],
                 "g_q": {"kind": "constant", "value": 0.1, "block": [[1.0, 0.0], [0.0, 1.0]]}},
        "terminal": {"h": [[0.5, 0.0], [0.0, 0.5]]},
        "initial": {"mean": [0.5, -0.3], "cov": [[0.05, 0.0], [0.0, 0.05]]}}
}"#;

#[test]
fn general_model_satisfies_the_optimality_relation() {
    let cfg = ProblemConfig::from_json(GENERAL).unwrap();
    let (spec, sol) = setup(&cfg);
    let rep =
        fundamental_relation_residual(&spec, &sol, &unit_delta(&spec), 0.1, 1000, 10, 77).unwrap();
    assert!(rep.residual_a.abs() <= 3.0 * rep.se_a, "{rep:?}");
    assert!(rep.residual_b_crn.abs() <= 3.0 * rep.se_b_crn, "{rep:?}");
    assert!(rep.residual_c.abs() <= 3.0 * rep.se_c, "{rep:?}");
    assert!(sol.y[0].norm() > 1e-3);
}
