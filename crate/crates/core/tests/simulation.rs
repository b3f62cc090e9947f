use nalgebra::{DMatrix, DVector};
use netprobe::graph::{laplacian, log_uniform, random_graph, seeded_rng};
use netprobe::model::{
    closed_loop_rhs, integrator_agent, lti_agent, neural_agent, polynomial_agent, steady_state_residual, Couplings,
    EdgeCoupling,
};
use netprobe::simulator::*;
use netprobe::{NetworkSystem, WeightedGraph};

fn identity_couplings(n: usize) -> Couplings {
    Couplings::uniform(n, EdgeCoupling::identity())
}

fn random_lti(n: usize, seed: u64) -> NetworkSystem {
    let g = random_graph(n, 0.3, (0.3, 10.0), seed).unwrap();
    let mut rng = seeded_rng(seed + 100);
    let agents = (0..n).map(|_| lti_agent(log_uniform(&mut rng, 1.0, 10.0))).collect();
    NetworkSystem::new(g, agents, identity_couplings(n)).unwrap()
}

/// `(A + L) y = w` by a dense solve, built from the graph directly.
fn lti_oracle(sys: &NetworkSystem, a: &[f64], w: &DVector<f64>) -> DVector<f64> {
    let l = laplacian(sys.graph());
    let m = DMatrix::from_diagonal(&DVector::from_column_slice(a)) + l;
    m.lu().solve(w).unwrap()
}

fn a_of(sys: &NetworkSystem) -> Vec<f64> {
    sys.agents()
        .iter()
        .map(|ag| ag.k_inv_deriv(0.0).unwrap())
        .collect()
}

#[test]
fn single_lti_agent_settles_at_half() {
    let sys = NetworkSystem::new(WeightedGraph::empty(1).unwrap(), vec![lti_agent(2.0)], identity_couplings(1)).unwrap();
    let s = simulate_to_steady_state(
        &sys,
        &DVector::from_element(1, 1.0),
        &DVector::zeros(1),
        &SimOptions::default(),
        &NoiseSpec::default(),
    )
    .unwrap();
    assert!(s.converged);
    assert!((s.y[0] - 0.5).abs() < 1e-9, "{}", s.y[0]);
}

#[test]
fn two_integrators_split_the_input() {
    let g = WeightedGraph::new(2, [(0, 1, 1.0)]).unwrap();
    let sys = NetworkSystem::new(g, vec![integrator_agent(); 2], identity_couplings(2)).unwrap();
    let s = simulate_to_steady_state(
        &sys,
        &DVector::from_vec(vec![1.0, -1.0]),
        &DVector::zeros(2),
        &SimOptions::default(),
        &NoiseSpec::default(),
    )
    .unwrap();
    assert!(s.converged);
    assert!((s.y[0] - 0.5).abs() < 1e-8 && (s.y[1] + 0.5).abs() < 1e-8, "{}", s.y);
}

#[test]
fn isolated_neuron_settles_at_tanh_two() {
    let sys = NetworkSystem::new(WeightedGraph::empty(1).unwrap(), vec![neural_agent(1.0, 1.0)], identity_couplings(1))
        .unwrap();
    let s = simulate_to_steady_state(
        &sys,
        &DVector::from_element(1, 2.0),
        &DVector::zeros(1),
        &SimOptions::default(),
        &NoiseSpec::default(),
    )
    .unwrap();
    assert!((s.y[0] - 2.0f64.tanh()).abs() < 1e-9);
    assert!((s.y[0] - 0.9640).abs() < 1e-4);
}

#[test]
fn repeated_input_converges_immediately() {
    let sys = random_lti(6, 1);
    let w = DVector::from_fn(6, |i, _| i as f64 - 2.5);
    let out = run_probe_schedule(
        &sys,
        &[w.clone(), w],
        &DVector::zeros(6),
        &SimOptions::default(),
        &NoiseSpec::default(),
        ScheduleMode::Sequential,
    )
    .unwrap();
    assert!(out[0].t_elapsed > 1.0);
    // the derivative test only needs the dwell steps
    assert!(out[1].t_elapsed < out[0].t_elapsed / 5.0, "{} vs {}", out[1].t_elapsed, out[0].t_elapsed);
    assert!((&out[1].y - &out[0].y).amax() < 1e-9);
}

#[test]
fn lti_simulation_matches_linear_solve() {
    for seed in 0..4 {
        let sys = random_lti(10, seed);
        let a = a_of(&sys);
        let w = DVector::from_fn(10, |i, _| ((i * 7 + 3) % 5) as f64 - 2.0);
        let s = simulate_to_steady_state(&sys, &w, &DVector::zeros(10), &SimOptions::default(), &NoiseSpec::default())
            .unwrap();
        let oracle = lti_oracle(&sys, &a, &w);
        assert!((&s.y - &oracle).amax() <= 10.0 * 1e-9, "seed {seed}: {:e}", (&s.y - &oracle).amax());
        assert!((linear_steady_state(&sys, &w).unwrap() - &oracle).amax() < 1e-12);
    }
}

#[test]
fn switching_schedule_tracks_linear_solves() {
    let sys = random_lti(8, 11);
    let a = a_of(&sys);
    let mut schedule = vec![DVector::from_fn(8, |i, _| (i as f64).sin())];
    for i in 0..8 {
        let mut w = schedule[0].clone();
        w[i] += 0.1;
        schedule.push(w);
    }
    let opts = SimOptions::fixed_time(10.0);
    let out = run_probe_schedule(&sys, &schedule, &DVector::zeros(8), &opts, &NoiseSpec::default(), ScheduleMode::Sequential)
        .unwrap();
    for (w, s) in schedule.iter().zip(&out) {
        assert!((&s.y - lti_oracle(&sys, &a, w)).amax() < 1e-8);
        assert!((s.t_elapsed - 10.0).abs() < 1e-12);
    }
}

#[test]
fn sequential_and_parallel_modes_agree() {
    let sys = random_lti(8, 5);
    let a = a_of(&sys);
    let schedule: Vec<_> = (0..4).map(|k| DVector::from_fn(8, |i, _| ((i + k) % 3) as f64)).collect();
    let run = |mode| {
        run_probe_schedule(&sys, &schedule, &DVector::zeros(8), &SimOptions::default(), &NoiseSpec::default(), mode).unwrap()
    };
    let seq = run(ScheduleMode::Sequential);
    let par = run(ScheduleMode::Parallel);
    for ((s, p), w) in seq.iter().zip(&par).zip(&schedule) {
        assert!((&s.y - &p.y).amax() < 1e-6);
        assert!((&s.y - lti_oracle(&sys, &a, w)).amax() < 1e-8);
    }
}

#[test]
fn measurement_noise_is_identical_across_modes() {
    let sys = random_lti(5, 2);
    let schedule: Vec<_> = (0..3).map(|k| DVector::from_element(5, k as f64)).collect();
    let noise = NoiseSpec {
        disturbance: None,
        measurement_sigma: 1e-3,
        seed: 9,
    };
    let run = |mode| run_probe_schedule(&sys, &schedule, &DVector::zeros(5), &SimOptions::default(), &noise, mode).unwrap();
    let seq = run(ScheduleMode::Sequential);
    let par = run(ScheduleMode::Parallel);
    for (s, p) in seq.iter().zip(&par) {
        // same draws on top of steady states that agree to integration accuracy
        assert!((&s.y - &p.y).amax() < 1e-7);
    }
}

#[test]
fn non_convergence_is_flagged() {
    // a lone integrator with constant input ramps forever
    let sys =
        NetworkSystem::new(WeightedGraph::empty(1).unwrap(), vec![integrator_agent()], identity_couplings(1)).unwrap();
    let mut opts = SimOptions::default();
    opts.convergence.t_max = 5.0;
    let s = simulate_to_steady_state(&sys, &DVector::from_element(1, 1.0), &DVector::zeros(1), &opts, &NoiseSpec::default())
        .unwrap();
    assert!(!s.converged);
    assert!(s.residual_norm.is_finite());
}

#[test]
fn blow_up_is_an_integration_failure() {
    // an unstable agent violates the passivity contract and diverges
    let sys = NetworkSystem::new(
        WeightedGraph::empty(1).unwrap(),
        vec![polynomial_agent(1.0, 0.0)],
        identity_couplings(1),
    )
    .unwrap();
    let grow = |x: f64| sys.agents()[0].f(x);
    assert!(grow(1.0) < 0.0, "polynomial agents are stable by construction");
    // x' = -x^3 - x with a huge input saturates but stays finite; a NaN
    // initial state is the way to force a failure
    let err = simulate_to_steady_state(
        &sys,
        &DVector::from_element(1, 1.0),
        &DVector::from_element(1, f64::NAN),
        &SimOptions::default(),
        &NoiseSpec::default(),
    );
    assert!(err.is_err());
}

#[test]
fn newton_matches_linear_solve() {
    for seed in 0..5 {
        let sys = random_lti(12, seed);
        let a = a_of(&sys);
        let w = DVector::from_fn(12, |i, _| (i as f64 * 0.7).cos());
        let y = newton_steady_state(&sys, &w, &DVector::zeros(12)).unwrap();
        assert!((&y - lti_oracle(&sys, &a, &w)).amax() < 1e-12);
        assert!(steady_state_residual(&sys, &y, &w).unwrap().amax() < 1e-12);
    }
}

#[test]
fn newton_recovers_constructed_fixed_point() {
    let g = WeightedGraph::new(3, [(0, 1, 2.0), (1, 2, 1.0)]).unwrap();
    let sys = NetworkSystem::new(
        g,
        vec![neural_agent(2.0, 1.5), neural_agent(5.0, 1.0), neural_agent(3.0, 2.0)],
        Couplings::uniform(3, EdgeCoupling::Tanh { gain: 1.0 }),
    )
    .unwrap();
    let y_star = DVector::from_vec(vec![0.3, -0.2, 0.6]);
    let w = sys.steady_state_map(&y_star).unwrap();
    let y = newton_steady_state(&sys, &w, &DVector::zeros(3)).unwrap();
    assert!((&y - &y_star).amax() < 1e-12);
}

#[test]
fn newton_pins_the_mean_for_integrators() {
    let g = WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 3.0)]).unwrap();
    let sys = NetworkSystem::new(g, vec![integrator_agent(); 3], identity_couplings(3)).unwrap();
    let w = DVector::from_vec(vec![1.0, 0.5, -1.5]);
    let guess = DVector::from_element(3, 0.25);
    let y = newton_steady_state(&sys, &w, &guess).unwrap();
    assert!((y.mean() - 0.25).abs() < 1e-12);
    assert!(steady_state_residual(&sys, &y, &w).unwrap().amax() < 1e-12);
}

#[test]
fn newton_divergence_carries_the_last_iterate() {
    // no steady state: a lone integrator with nonzero input
    let sys =
        NetworkSystem::new(WeightedGraph::empty(1).unwrap(), vec![integrator_agent()], identity_couplings(1)).unwrap();
    match newton_steady_state(&sys, &DVector::from_element(1, 1.0), &DVector::zeros(1)) {
        Err(netprobe::Error::NewtonDiverged { last, .. }) => assert_eq!(last.len(), 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn newton_and_simulation_agree_on_nonlinear_networks() {
    for seed in 0..4u64 {
        let n = 4 + seed as usize * 2;
        let g = random_graph(n, 0.5, (0.5, 3.0), seed).unwrap();
        let mut rng = seeded_rng(seed);
        let agents = (0..n)
            .map(|k| match k % 3 {
                0 => neural_agent(log_uniform(&mut rng, 3.0, 30.0), log_uniform(&mut rng, 1.0, 5.0)),
                1 => polynomial_agent(log_uniform(&mut rng, 0.5, 2.0), 0.3),
                _ => lti_agent(log_uniform(&mut rng, 1.0, 5.0)),
            })
            .collect();
        let couplings = Couplings::from_fn(n, |i, j| {
            if (i + j) % 2 == 0 {
                EdgeCoupling::Tanh { gain: 1.5 }
            } else {
                EdgeCoupling::Cubic { c1: 1.0, c3: 0.5 }
            }
        });
        let sys = NetworkSystem::new(g, agents, couplings).unwrap();
        let w = DVector::from_fn(n, |i, _| 0.3 * ((i as f64) - 1.5));
        let sim = simulate_to_steady_state(&sys, &w, &DVector::zeros(n), &SimOptions::default(), &NoiseSpec::default())
            .unwrap();
        assert!(sim.converged);
        let newton = newton_steady_state(&sys, &w, &DVector::zeros(n)).unwrap();
        assert!((&sim.y - &newton).amax() < 1e-6, "seed {seed}: {:e}", (&sim.y - &newton).amax());
    }
}

#[test]
fn integrator_network_conserves_the_mean() {
    let g = random_graph(6, 0.6, (0.5, 2.0), 4).unwrap();
    let sys = NetworkSystem::new(g, vec![integrator_agent(); 6], identity_couplings(6)).unwrap();
    let w = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.5, 1.5, -1.5]);
    let x0 = DVector::from_vec(vec![0.3, 0.1, -0.4, 0.9, 0.0, 0.2]);
    let mut sim = Simulator::new(&sys, &x0, &SimOptions::fixed_time(0.5), &NoiseSpec::default()).unwrap();
    for _ in 0..10 {
        sim.run_segment(&w).unwrap();
        assert!((sim.state().mean() - x0.mean()).abs() < 1e-9);
    }
}

#[test]
fn fixed_step_runs_are_bit_identical() {
    let sys = random_lti(7, 3);
    let opts = SimOptions {
        integrator: IntegratorKind::Rk4 { dt: 0.01 },
        mode: SwitchMode::FixedTime { switch_time: 3.0 },
        ..Default::default()
    };
    let noise = NoiseSpec {
        disturbance: Some(0.5),
        measurement_sigma: 1e-4,
        seed: 42,
    };
    let w = DVector::from_element(7, 1.0);
    let run = || {
        let mut sim = Simulator::new(&sys, &DVector::zeros(7), &opts, &noise).unwrap();
        sim.record_trajectory(10);
        let s = sim.run_segment(&w).unwrap();
        (s.y, sim.trajectory().to_vec())
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn trajectory_csv_layout() {
    let sys = random_lti(3, 1);
    let mut sim = Simulator::new(&sys, &DVector::zeros(3), &SimOptions::fixed_time(1.0), &NoiseSpec::default()).unwrap();
    sim.record_trajectory(5);
    sim.run_segment(&DVector::from_element(3, 1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    sim.write_trajectory_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x_1,x_2,x_3,y_1,y_2,y_3");
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first.len(), 7);
    assert_eq!(first[0], 0.0);
}

#[test]
fn rhs_vanishes_at_steady_states() {
    let sys = random_lti(6, 8);
    let w = DVector::from_fn(6, |i, _| i as f64);
    let y = newton_steady_state(&sys, &w, &DVector::zeros(6)).unwrap();
    let x = sys.state_from_output(&y).unwrap();
    assert!(closed_loop_rhs(&sys, &x, &w).unwrap().amax() < 1e-10);
}

fn disturbance_cfg(delta: f64, trials: usize, seed: u64) -> DisturbanceConfig {
    DisturbanceConfig {
        delta_in: delta,
        trials,
        seed,
        dt: 0.01,
        transient: 10.0,
        horizon: 30.0,
        candidate_bounds: vec![delta],
    }
}

#[test]
fn zero_disturbance_stays_at_the_steady_state() {
    let sys = random_lti(4, 6);
    let w = DVector::from_element(4, 1.0);
    let r = disturbance_experiment(&sys, &w, &DVector::zeros(4), &disturbance_cfg(0.0, 2, 1), &SimOptions::default())
        .unwrap();
    assert!(r.max_sup_deviation < 1e-9, "{:e}", r.max_sup_deviation);
}

#[test]
fn scalar_disturbance_is_bounded_by_its_amplitude() {
    let sys = NetworkSystem::new(WeightedGraph::empty(1).unwrap(), vec![lti_agent(1.0)], identity_couplings(1)).unwrap();
    let c = 0.7;
    let r = disturbance_experiment(
        &sys,
        &DVector::zeros(1),
        &DVector::from_element(1, 3.0),
        &disturbance_cfg(c, 20, 3),
        &SimOptions::default(),
    )
    .unwrap();
    assert!(r.max_sup_deviation <= c, "{}", r.max_sup_deviation);
    assert_eq!(r.exceed_fraction, vec![(c, 0.0)]);
}

#[test]
fn halving_the_disturbance_halves_the_deviation() {
    let sys = random_lti(5, 12);
    let w = DVector::from_element(5, 0.5);
    let run = |d| {
        disturbance_experiment(&sys, &w, &DVector::zeros(5), &disturbance_cfg(d, 6, 77), &SimOptions::default())
            .unwrap()
            .max_sup_deviation
    };
    let full = run(1.0);
    let half = run(0.5);
    // same seeds, linear system: the response scales exactly
    assert!(half <= 0.5 * full * 1.2, "{half} vs {full}");
    assert!((half / full - 0.5).abs() < 1e-6);
}

#[test]
fn options_are_validated() {
    let sys = random_lti(2, 0);
    let bad = SimOptions {
        integrator: IntegratorKind::Rk4 { dt: 0.0 },
        ..Default::default()
    };
    assert!(Simulator::new(&sys, &DVector::zeros(2), &bad, &NoiseSpec::default()).is_err());
    let bad_noise = NoiseSpec {
        disturbance: Some(-1.0),
        ..Default::default()
    };
    assert!(Simulator::new(&sys, &DVector::zeros(2), &SimOptions::default(), &bad_noise).is_err());
    assert!(run_probe_schedule(&sys, &[], &DVector::zeros(2), &SimOptions::default(), &NoiseSpec::default(), ScheduleMode::Sequential).is_err());
}
