use super::population::{bits_of, simulate_bits};
use super::*;
use crate::constraints::{build, ConstraintSet, LocalCost, TargetSignal};
use crate::model::{
    simulate, InitialDensity, Mode, ProposalWeights, SwitchProposal, WhParams, WhState,
};
use crate::oracle::{random_instance, FiniteInstance};
use crate::rng::{stream_seed, substream_rng, Purpose};
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn test_params() -> WhParams {
    WhParams::from_coefficients(5e-4, 1.1944577161968465e-6, 2200.0, 20.0, 50.0, 65.0, 10.0)
        .unwrap()
}

#[test]
fn single_sample_weight_is_one() {
    for (ell0, eps) in [(0.0, 0.1), (-123.4, 0.05), (7.7, 3.0)] {
        let (w, log_b) = log_weights(&[ell0], eps);
        assert_eq!(w, vec![1.0]);
        assert_relative_eq!(log_b, ell0, epsilon = 1e-12);
    }
}

#[test]
fn equal_scores_give_unit_weights() {
    let (w, log_b) = log_weights(&[-2.5; 8], 0.1);
    for v in w {
        assert_eq!(v, 1.0);
    }
    assert_relative_eq!(log_b, -2.5, epsilon = 1e-12);
}

#[test]
fn two_sample_softmax_closed_form() {
    // ell0 = (0, -eps ln 3) gives weights (1.5, 0.5) for any eps.
    for eps in [0.05, 0.1, 1.0] {
        let (w, _) = log_weights(&[0.0, -eps * 3.0f64.ln()], eps);
        assert_relative_eq!(w[0], 1.5, max_relative = 1e-12);
        assert_relative_eq!(w[1], 0.5, max_relative = 1e-12);
    }
}

#[test]
fn extreme_scores_stay_finite() {
    let (w, log_b) = log_weights(&[-1e6, 0.0, -2e6], 0.01);
    assert!(log_b.is_finite());
    assert!(w.iter().all(|v| v.is_finite()));
    let mean: f64 = w.iter().sum::<f64>() / 3.0;
    assert_relative_eq!(mean, 1.0, epsilon = 1e-12);
}

#[test]
fn ell0_examples() {
    let params = test_params();
    let drains = vec![0.0; 6];
    let initial = WhState {
        theta: 55.0,
        mode: Mode::Off,
    };
    let x = simulate(initial, &params, &drains, &[]);
    let y_same = simulate(initial, &params, &drains, &[]);
    let y_diff = simulate(initial, &params, &drains, &[2]);
    let cs = ConstraintSet::empty(6, 1);
    let zero = Multipliers::zeros(0, 0.1);
    assert_eq!(ell0(&x, &y_same, &zero, &cs, LocalCost::ZeroOne), 0.0);
    assert_eq!(ell0(&x, &y_diff, &zero, &cs, LocalCost::ZeroOne), -1.0);

    // One active multiplier against a row with value 0.5 on y.
    let cs = build::cap(6, 1, 0.5, Some((3, 3))).unwrap();
    let m = Multipliers::new(vec![1.0], 0.1).unwrap();
    let f_y = cs.evaluate(&y_diff);
    let expected = -f_y[0] - 1.0;
    assert_relative_eq!(
        ell0(&x, &y_diff, &m, &cs, LocalCost::ZeroOne),
        expected,
        epsilon = 1e-15
    );
}

#[test]
fn fast_path_matches_reference_simulation() {
    let params = test_params();
    let mut rng = ChaCha8Rng::seed_from_u64(1729);
    let proposal = SwitchProposal::uniform(60, 2);
    for _ in 0..200 {
        let drains: Vec<f64> = (0..60)
            .map(|_| {
                use rand::Rng;
                if rng.random_bool(0.7) {
                    0.0
                } else {
                    rng.random_range(0.0..2e6)
                }
            })
            .collect();
        let initial = WhState {
            theta: {
                use rand::Rng;
                rng.random_range(50.0..65.0)
            },
            mode: if {
                use rand::Rng;
                rng.random_bool(0.25)
            } {
                Mode::On
            } else {
                Mode::Off
            },
        };
        let schedule = proposal.sample(&mut rng);
        let reference = simulate(initial, &params, &drains, &schedule);
        let (bits, lam_dot) = simulate_bits(initial, &params, &drains, &schedule, None);
        assert_eq!(bits, bits_of(&reference), "mode sequences must be bit-identical");
        assert_eq!(lam_dot, 0.0);

        let coeff: Vec<f64> = (0..=60).map(|t| (t % 5) as f64 * 0.21).collect();
        let (_, lam_dot) = simulate_bits(initial, &params, &drains, &schedule, Some(&coeff));
        let direct: f64 = reference
            .modes()
            .enumerate()
            .map(|(t, m)| coeff[t] * m.as_f64())
            .sum();
        assert_relative_eq!(lam_dot, direct, max_relative = 1e-12, epsilon = 1e-12);
    }
}

/// Tiny two-agent population over three steps, enumerable exactly.
fn tiny_population() -> (Vec<AgentSpec>, ConstraintSet) {
    let params = test_params();
    let horizon = 3;
    let specs = vec![
        AgentSpec {
            params,
            initial: WhState {
                theta: 55.0,
                mode: Mode::Off,
            },
            drains: vec![0.0, 4e5, 0.0],
            budget: 2,
        },
        AgentSpec {
            params,
            initial: WhState {
                theta: 60.0,
                mode: Mode::On,
            },
            drains: vec![2e5, 0.0, 1e5],
            budget: 2,
        },
    ];
    let signal = TargetSignal::new(vec![0.5, 0.4, 0.6]).unwrap();
    let cs = build::tracking(horizon, 2, &signal).unwrap();
    (specs, cs)
}

#[test]
fn exhaustive_estimator_equals_direct_summation() {
    let (specs, cs) = tiny_population();
    let inst = enumerate_population(&specs, &cs, LocalCost::ZeroOne, 0.1, |h, b| {
        SwitchProposal::uniform(h, b)
    })
    .unwrap();
    let lambda = vec![0.12, 0.3, 0.05, 0.0];
    let multipliers = Multipliers::new(lambda.clone(), 0.1).unwrap();

    // Exact moments by direct summation over the enumerated space.
    let exact = inst.exact_moment(&lambda);

    // The estimator run in exhaustive mode reproduces them to roundoff.
    let source = FiniteSource::new(&inst, SampleMode::Exhaustive, 0).unwrap();
    let (gradient, batch) = estimate_gradient(&source, &multipliers, 0, false).unwrap();
    for (g, e) in gradient.iter().zip(&exact) {
        assert_relative_eq!(g, e, max_relative = 1e-11, epsilon = 1e-13);
    }
    assert!(batch.max_weight_normalization_error() < 1e-12);
}

#[test]
fn sampled_estimator_converges_to_direct_summation() {
    let (specs, cs) = tiny_population();
    let epsilon = 0.1;
    let inst = enumerate_population(&specs, &cs, LocalCost::ZeroOne, epsilon, |h, b| {
        SwitchProposal::uniform(h, b)
    })
    .unwrap();
    let lambda = vec![0.12, 0.3, 0.05, 0.0];
    let multipliers = Multipliers::new(lambda.clone(), epsilon).unwrap();
    let exact = inst.exact_moment(&lambda);

    // The production population source with a large batch gets close.
    let source = PopulationSource::new(
        specs,
        cs,
        LocalCost::ZeroOne,
        8192,
        stream_seed(7, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let (gradient, batch) = estimate_gradient(&source, &multipliers, 0, false).unwrap();
    assert!(batch.max_weight_normalization_error() < 1e-12);
    for (g, e) in gradient.iter().zip(&exact) {
        assert!(
            (g - e).abs() < 0.02,
            "sampled moment {g} vs exact {e} (diff {})",
            (g - e).abs()
        );
    }
}

#[test]
fn zero_budget_gradient_is_nominal_mean() {
    let (mut specs, cs) = tiny_population();
    for s in &mut specs {
        s.budget = 0;
    }
    let nominal_mean: Vec<f64> = {
        let mut acc = vec![0.0; cs.len()];
        for s in &specs {
            let traj = simulate(s.initial, &s.params, &s.drains, &[]);
            for (slot, v) in acc.iter_mut().zip(cs.evaluate(&traj)) {
                *slot += v / specs.len() as f64;
            }
        }
        acc
    };
    let source = PopulationSource::new(
        specs,
        cs,
        LocalCost::ZeroOne,
        16,
        stream_seed(3, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let multipliers = Multipliers::new(vec![0.9, 0.1, 0.0, 0.2], 0.1).unwrap();
    let (gradient, _) = estimate_gradient(&source, &multipliers, 0, false).unwrap();
    for (g, e) in gradient.iter().zip(&nominal_mean) {
        assert_relative_eq!(g, e, max_relative = 1e-12, epsilon = 1e-12);
    }
}

#[test]
fn constant_cost_cancels_in_weights() {
    // Zero multipliers and a proposal that always schedules one effective
    // switch: every candidate differs from nominal, every cost is one, so
    // the weights are uniform and the gradient is the plain sample mean.
    let (specs, cs) = tiny_population();
    let weights = ProposalWeights {
        class_weights: vec![0.0, 1.0, 0.0],
        time_weights: vec![],
    };
    let source = PopulationSource::new(
        specs,
        cs.clone(),
        LocalCost::ZeroOne,
        64,
        stream_seed(11, Purpose::Solver),
        move |h, b| SwitchProposal::with_weights(h, b, &weights).unwrap(),
    )
    .unwrap();
    let multipliers = Multipliers::zeros(cs.len(), 0.1);
    let (gradient, batch) = estimate_gradient(&source, &multipliers, 0, true).unwrap();
    let mut plain_mean = vec![0.0; cs.len()];
    for agent in &batch.agents {
        for s in &agent.samples {
            assert_eq!(s.cost, 1.0, "every candidate must differ from nominal");
            assert_relative_eq!(s.weight, 1.0, epsilon = 1e-12);
            for (slot, v) in plain_mean.iter_mut().zip(s.f.as_ref().unwrap()) {
                *slot += agent.agent_weight * s.log_prob.exp() * v;
            }
        }
    }
    for (g, e) in gradient.iter().zip(&plain_mean) {
        assert_relative_eq!(g, e, max_relative = 1e-12, epsilon = 1e-12);
    }
}

#[test]
fn positive_weight_samples_satisfy_invariants() {
    let (specs, cs) = tiny_population();
    let check_specs = specs.clone();
    let source = PopulationSource::new(
        specs,
        cs,
        LocalCost::ZeroOne,
        32,
        stream_seed(5, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let multipliers = Multipliers::new(vec![0.4, 0.0, 0.1, 0.3], 0.1).unwrap();
    let batch = source.estimate(&multipliers, 0, false).unwrap();
    for agent in &batch.agents {
        let spec = &check_specs[agent.agent];
        for s in &agent.samples {
            assert!(s.weight > 0.0);
            let traj = simulate(spec.initial, &spec.params, &spec.drains, &s.switches);
            traj.validate(&spec.params, &spec.drains, spec.budget).unwrap();
        }
    }
}

#[test]
fn hessian_diagnostics() {
    let (specs, cs) = tiny_population();
    let epsilon = 0.1;
    let lambda = vec![0.2, 0.05, 0.0, 0.1];

    // Z = 1: a point mass has zero conditional variance.
    let source = PopulationSource::new(
        specs.clone(),
        cs.clone(),
        LocalCost::ZeroOne,
        1,
        stream_seed(13, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let multipliers = Multipliers::new(lambda.clone(), epsilon).unwrap();
    let (_, batch) = estimate_gradient(&source, &multipliers, 0, true).unwrap();
    let h = estimate_hessian(&batch).unwrap();
    for row in &h {
        for &v in row {
            assert!(v.abs() < 1e-12, "Z=1 conditional covariance must vanish: {v}");
        }
    }

    // Exhaustive batch matches the exact conditional covariance.
    let inst = enumerate_population(&specs, &cs, LocalCost::ZeroOne, epsilon, |h, b| {
        SwitchProposal::uniform(h, b)
    })
    .unwrap();
    let source = FiniteSource::new(&inst, SampleMode::Exhaustive, 0).unwrap();
    let (_, batch) = estimate_gradient(&source, &multipliers, 0, true).unwrap();
    let h = estimate_hessian(&batch).unwrap();
    let exact = inst.exact_conditional_covariance(&lambda);
    for i in 0..h.len() {
        for j in 0..h.len() {
            assert_relative_eq!(h[i][j], exact[i][j], max_relative = 1e-9, epsilon = 1e-12);
            assert_relative_eq!(h[i][j], h[j][i], epsilon = 1e-12);
        }
    }
}

#[test]
fn constant_scalar_f_has_zero_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut inst = random_instance(&mut rng, 8, 1, 0.2);
    for f in &mut inst.f {
        f[0] = 0.7;
    }
    let source = FiniteSource::new(&inst, SampleMode::Exhaustive, 0).unwrap();
    let multipliers = Multipliers::new(vec![0.3], 0.2).unwrap();
    let (_, batch) = estimate_gradient(&source, &multipliers, 0, true).unwrap();
    let h = estimate_hessian(&batch).unwrap();
    assert!(h[0][0].abs() < 1e-12);
}

#[test]
fn solve_with_no_constraints_traces_every_iteration() {
    let (specs, _) = tiny_population();
    let cs = ConstraintSet::empty(3, 2);
    let source = PopulationSource::new(
        specs,
        cs,
        LocalCost::ZeroOne,
        4,
        stream_seed(1, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let config = SolverConfig {
        samples_per_agent: 4,
        iterations: 25,
        step: StepSchedule::Constant { rho: 0.1 },
        epsilon: 0.1,
        ascent_on_violation: true,
        lambda_cap: 100.0,
        keep_f: false,
    };
    let result = solve(&source, &config, None).unwrap();
    assert_eq!(result.trace.len(), 25);
    assert!(result.multipliers.lambda.is_empty());
    assert!(!result.hit_cap);
}

#[test]
fn slack_constraints_keep_multipliers_at_zero() {
    let (specs, _) = tiny_population();
    // Cap far above anything reachable: the rows stay strictly negative.
    let cs = build::cap(3, 2, 50.0, None).unwrap();
    let source = PopulationSource::new(
        specs,
        cs,
        LocalCost::ZeroOne,
        8,
        stream_seed(2, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let config = SolverConfig {
        samples_per_agent: 8,
        iterations: 40,
        step: StepSchedule::Constant { rho: 0.05 },
        epsilon: 0.1,
        ascent_on_violation: true,
        lambda_cap: 100.0,
        keep_f: false,
    };
    let result = solve(&source, &config, Some(vec![0.3; 2])).unwrap();
    for &l in &result.multipliers.lambda {
        assert_eq!(l, 0.0, "slack constraints must drive multipliers to zero");
    }
}

#[test]
fn exhaustive_solve_approaches_the_oracle_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let inst = random_instance(&mut rng, 12, 2, 0.1);
    let oracle = crate::oracle::solve_primal(&inst, crate::oracle::PrimalOptions::default())
        .unwrap();
    let source = FiniteSource::new(&inst, SampleMode::Exhaustive, 0).unwrap();
    let config = SolverConfig {
        samples_per_agent: 1,
        iterations: 4000,
        step: StepSchedule::Harmonic {
            rho0: 0.02,
            k_half: 2000.0,
        },
        epsilon: 0.1,
        ascent_on_violation: true,
        lambda_cap: 1e4,
        keep_f: false,
    };
    let result = solve(&source, &config, None).unwrap();
    let dual = inst.exact_dual_value(&result.multipliers.lambda);
    assert!(
        (dual - oracle.value).abs() <= 1e-4 * (1.0 + oracle.value.abs()),
        "dual {dual} vs primal optimum {}",
        oracle.value
    );
    for &m in &inst.exact_moment(&result.multipliers.lambda) {
        assert!(m <= 1e-4, "moment {m} must be satisfied at the optimum");
    }
}

#[test]
fn empirical_dual_gradient_matches_finite_differences() {
    // Common random numbers: freeze one batch, then the stored-sample dual
    // value must differentiate to the stored-sample gradient.
    let (specs, cs) = tiny_population();
    let epsilon = 0.1;
    let source = PopulationSource::new(
        specs,
        cs.clone(),
        LocalCost::ZeroOne,
        32,
        stream_seed(21, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let lambda = vec![0.15, 0.02, 0.3, 0.07];
    let multipliers = Multipliers::new(lambda.clone(), epsilon).unwrap();
    let (_, batch) = estimate_gradient(&source, &multipliers, 0, true).unwrap();
    let gradient = batch.empirical_gradient(&multipliers).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        use rand::Rng;
        let direction: Vec<f64> = (0..lambda.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-4;
        let shift = |s: f64| -> Multipliers {
            Multipliers::new(
                lambda.iter().zip(&direction).map(|(l, d)| l + s * d).collect(),
                epsilon,
            )
            .unwrap()
        };
        let fd = (batch.empirical_dual_value(&shift(h)).unwrap()
            - batch.empirical_dual_value(&shift(-h)).unwrap())
            / (2.0 * h);
        let directional: f64 = gradient.iter().zip(&direction).map(|(g, d)| g * d).sum();
        assert_relative_eq!(fd, directional, max_relative = 1e-5, epsilon = 1e-12);
    }
}

#[test]
fn empirical_objective_is_convex_in_zeta() {
    // J(zeta) = eps^{-1} * mean log-partition at lambda = eps * zeta is a
    // logsumexp of affine functions of zeta: midpoints never overshoot.
    let (specs, cs) = tiny_population();
    let epsilon = 0.1;
    let source = PopulationSource::new(
        specs,
        cs.clone(),
        LocalCost::ZeroOne,
        32,
        stream_seed(23, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let base = Multipliers::zeros(cs.len(), epsilon);
    let (_, batch) = estimate_gradient(&source, &base, 0, true).unwrap();
    let j = |zeta: &[f64]| -> f64 {
        let m = Multipliers::new(zeta.iter().map(|z| z * epsilon).collect(), epsilon).unwrap();
        -batch.empirical_dual_value(&m).unwrap() / epsilon
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        use rand::Rng;
        let z1: Vec<f64> = (0..cs.len()).map(|_| rng.random_range(0.0..4.0)).collect();
        let z2: Vec<f64> = (0..cs.len()).map(|_| rng.random_range(0.0..4.0)).collect();
        let mid: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
        assert!(
            j(&mid) <= 0.5 * (j(&z1) + j(&z2)) + 1e-10,
            "midpoint inequality violated"
        );
    }
}

#[test]
fn estimates_are_independent_of_thread_count() {
    let (specs, cs) = tiny_population();
    let source = PopulationSource::new(
        specs,
        cs.clone(),
        LocalCost::ZeroOne,
        16,
        stream_seed(77, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let multipliers = Multipliers::new(vec![0.3, 0.1, 0.0, 0.05], 0.1).unwrap();
    let (g1, _) = estimate_gradient(&source, &multipliers, 3, false).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (g2, _) = pool.install(|| estimate_gradient(&source, &multipliers, 3, false).unwrap());
    assert_eq!(g1, g2, "gradient must not depend on the thread pool");
}

#[test]
fn solve_rejects_bad_warm_start_and_config() {
    let (specs, cs) = tiny_population();
    let source = PopulationSource::new(
        specs,
        cs,
        LocalCost::ZeroOne,
        4,
        stream_seed(1, Purpose::Solver),
        |h, b| SwitchProposal::uniform(h, b),
    )
    .unwrap();
    let config = SolverConfig {
        samples_per_agent: 4,
        iterations: 5,
        step: StepSchedule::Constant { rho: 0.1 },
        epsilon: 0.1,
        ascent_on_violation: true,
        lambda_cap: 10.0,
        keep_f: false,
    };
    assert!(solve(&source, &config, Some(vec![0.0; 3])).is_err());
    let mut bad = config.clone();
    bad.iterations = 0;
    assert!(solve(&source, &bad, None).is_err());
}

#[test]
fn finite_sampled_mode_is_deterministic_per_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = random_instance(&mut rng, 10, 2, 0.1);
    let source = FiniteSource::new(&inst, SampleMode::Sampled(8), 42).unwrap();
    let m = Multipliers::new(vec![0.1, 0.2], 0.1).unwrap();
    let a = source.estimate(&m, 7, false).unwrap();
    let b = source.estimate(&m, 7, false).unwrap();
    let c = source.estimate(&m, 8, false).unwrap();
    let key = |batch: &WeightedBatch| -> Vec<(usize, u64)> {
        batch
            .agents
            .iter()
            .flat_map(|a| a.samples.iter().map(|s| (s.candidate, s.ell0.to_bits())))
            .collect()
    };
    assert_eq!(key(&a), key(&b));
    assert_ne!(key(&a), key(&c), "different iterations draw different batches");
}

#[test]
fn multiplier_cap_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut inst = random_instance(&mut rng, 8, 1, 0.1);
    // Make the row unsatisfiable so the multiplier runs away.
    for f in &mut inst.f {
        f[0] = f[0].abs() + 0.2;
    }
    let source = FiniteSource::new(&inst, SampleMode::Exhaustive, 0).unwrap();
    let config = SolverConfig {
        samples_per_agent: 1,
        iterations: 200,
        step: StepSchedule::Constant { rho: 0.5 },
        epsilon: 0.1,
        ascent_on_violation: true,
        lambda_cap: 5.0,
        keep_f: false,
    };
    let result = solve(&source, &config, None).unwrap();
    assert!(result.hit_cap, "runaway multiplier must be flagged");
    assert_eq!(result.multipliers.lambda[0], 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Self-normalization holds for any scores, probabilities and epsilon.
    #[test]
    fn weights_always_normalize(
        ell0s in proptest::collection::vec(-50.0f64..50.0, 1..40),
        eps in 0.01f64..5.0,
    ) {
        let (w, _) = log_weights(&ell0s, eps);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }

    /// Shifting every score by a constant leaves the weights unchanged.
    #[test]
    fn weights_are_shift_invariant(
        ell0s in proptest::collection::vec(-20.0f64..20.0, 2..20),
        shift in -100.0f64..100.0,
        eps in 0.05f64..2.0,
    ) {
        let (w1, b1) = log_weights(&ell0s, eps);
        let shifted: Vec<f64> = ell0s.iter().map(|e| e + shift).collect();
        let (w2, b2) = log_weights(&shifted, eps);
        for (a, b) in w1.iter().zip(&w2) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        prop_assert!((b2 - b1 - shift).abs() <= 1e-9 * b1.abs().max(1.0));
    }
}
