use csc_core::dgp::{generate_exact_fit_panel, generate_panel, DgpParams};
use csc_core::estimators::{
    fit_csc, fit_fdid, fit_pooled_sc, fit_psc, fit_separate_sc, predict_counterfactual, EstimatorConfig, Method,
    PscLambda,
};
use csc_core::harness::{run_simulation, ScenarioOverride, SimulationSpec};
use csc_core::panel::{train_test_split, CovariateTable, PanelMatrix, RecordOptions};
use csc_core::qp::{project_simplex, solve_constrained_ls, solve_simplex_ls, ConstrainedLsProblem, SolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

fn random_panel(seed: u64, n0: usize, n1: usize, t: usize, t0: usize, cov: CovariateTable) -> PanelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DMatrix::from_fn(n0 + n1, t, |_, _| rng.gen_range(0.0..10.0));
    PanelMatrix::new(
        y,
        (0..n0 + n1).map(|i| format!("u{i}")).collect(),
        (2000..2000 + t as i64).collect(),
        n0,
        t0,
        cov,
        None,
    )
    .unwrap()
}

fn dirichlet(rng: &mut ChaCha8Rng, p: usize) -> DVector<f64> {
    let d = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(Exp1));
    let s = d.sum();
    d / s
}

/// `(n0, n1, t, t0)` with `1 <= t0 < t`.
fn shape() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..6, 1usize..4, 2usize..7).prop_flat_map(|(n0, n1, t)| (Just(n0), Just(n1), Just(t), 1..t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn records_round_trip(seed in any::<u64>(), (n0, n1, t, t0) in shape()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = DMatrix::from_fn(n0 + n1, 2, |_, k| if k == 0 { rng.gen::<f64>() * 1e3 } else { f64::from(rng.gen::<bool>()) });
        let cov = CovariateTable::new(x, vec!["a".into(), "b".into()]).unwrap();
        let p = random_panel(seed, n0, n1, t, t0, cov);
        let mut recs = p.to_records();
        for unit in recs.chunks_mut(t) {
            unit.reverse();
        }
        let opts = RecordOptions { covariate_names: vec!["a".into(), "b".into()], ..RecordOptions::default() };
        let q = PanelMatrix::from_records(&recs, &opts).unwrap();
        prop_assert_eq!(q.outcomes(), p.outcomes());
        prop_assert_eq!(q.covariates().values(), p.covariates().values());
        prop_assert_eq!((q.n0(), q.t0()), (n0, t0));
    }

    #[test]
    fn blocks_reassemble(seed in any::<u64>(), (n0, n1, t, t0) in shape()) {
        let p = random_panel(seed, n0, n1, t, t0, CovariateTable::empty(n0 + n1));
        let b = p.blocks();
        prop_assert_eq!(b.y_n0_pre.shape(), (n0, t0));
        prop_assert_eq!(b.y_n1_post.shape(), (n1, t - t0));
        prop_assert_eq!(&b.reassemble(), p.outcomes());
    }

    #[test]
    fn split_partitions_pre_periods(seed in any::<u64>(), t0 in 2usize..8, frac in 0.0f64..1.0) {
        let t_train = 1 + ((t0 - 1) as f64 * frac) as usize % (t0 - 1);
        let p = random_panel(seed, 2, 1, t0 + 1, t0, CovariateTable::empty(3));
        let (train, held) = train_test_split(&p, t_train).unwrap();
        prop_assert_eq!(train.t0(), t_train);
        let mut all: Vec<usize> = (1..=t_train).collect();
        all.extend(&held);
        prop_assert_eq!(all, (1..=t0).collect::<Vec<_>>());
    }

    #[test]
    fn projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let v = DVector::from_vec(v);
        let once = project_simplex(&v).unwrap();
        prop_assert!((once.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(once.min() >= 0.0);
        let twice = project_simplex(&once).unwrap();
        prop_assert!((&twice - &once).amax() <= 1e-15);
    }

    #[test]
    fn simplex_solution_beats_random_feasible_points(seed in any::<u64>(), m in 1usize..8, p in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, p, |_, _| rng.gen_range(-3.0..3.0));
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let prob = ConstrainedLsProblem::simplex(a.clone(), b.clone());
        let rep = solve_constrained_ls(&prob, &SolverOptions::default()).unwrap();
        prop_assert!(rep.is_converged());
        let x = rep.solution_vector();
        prop_assert!(prob.equality_residual(&x) <= 1e-8);
        prop_assert!(prob.violation(&x) <= 1e-8);
        for _ in 0..1000 {
            let f = dirichlet(&mut rng, p);
            prop_assert!(rep.objective <= prob.objective(&f) + 1e-6);
        }
        for w in rep.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "trace {:?}", rep.objective_trace);
        }
        let again = solve_constrained_ls(&prob, &SolverOptions::default()).unwrap();
        prop_assert_eq!(&again, &rep);
        let fast = solve_simplex_ls(&a, &b).unwrap();
        prop_assert!((fast.objective - rep.objective).abs() <= 1e-8 * (1.0 + rep.objective));
    }

    #[test]
    fn sc_family_weights_are_on_the_simplex(seed in any::<u64>(), n0 in 2usize..7, n1 in 1usize..4, t0 in 1usize..6) {
        let p = random_panel(seed, n0, n1, t0 + 1, t0, CovariateTable::empty(n0 + n1));
        let sep = fit_separate_sc(&p).unwrap();
        let pooled = fit_pooled_sc(&p).unwrap();
        let psc = fit_psc(&p, &EstimatorConfig::new(Method::Psc).with_psc_lambda(PscLambda::Fixed(0.1))).unwrap();
        let csc = fit_csc(&p, &EstimatorConfig::default()).unwrap();
        for w in [&sep, &pooled, &psc.weights, &csc.weights] {
            prop_assert!(w.simplex_violation() <= 1e-8, "{:?}", w.provenance);
        }
        for c in 1..n1 {
            prop_assert_eq!(pooled.w.column(c), pooled.w.column(0));
        }
    }

    #[test]
    fn nesting_at_objective_level(seed in any::<u64>(), n0 in 2usize..7, n1 in 1usize..4, t0 in 2usize..6) {
        let n = n0 + n1;
        let dummies = DMatrix::from_fn(n, n1, |i, k| f64::from(i == n0 + k));
        let names = (0..n1).map(|k| format!("own{k}")).collect();
        let p = random_panel(seed, n0, n1, t0 + 1, t0, CovariateTable::new(dummies, names).unwrap());
        let sep = fit_separate_sc(&p).unwrap();
        let pooled = fit_pooled_sc(&p).unwrap();
        let k0 = fit_csc(&p, &EstimatorConfig::default().with_covariates(Vec::<String>::new())).unwrap();
        let own = fit_csc(&p, &EstimatorConfig::default()).unwrap();
        let psc0 = fit_psc(&p, &EstimatorConfig::new(Method::Psc).with_covariates(Vec::<String>::new()).with_psc_lambda(PscLambda::Fixed(0.0))).unwrap();
        prop_assert!((k0.weights.objective - pooled.objective).abs() <= 1e-6);
        prop_assert!((own.weights.objective - sep.objective).abs() <= 1e-6);
        prop_assert!((psc0.weights.objective - sep.objective).abs() <= 1e-6);
    }

    #[test]
    fn equal_covariates_share_columns(seed in any::<u64>(), n0 in 3usize..7, t0 in 2usize..6) {
        // Treated units 0 and 2 share category a; unit 1 is in category b.
        let n1 = 3;
        let n = n0 + n1;
        let cat = |i: usize| if i < n0 { i % 2 } else { usize::from(i - n0 == 1) };
        let x = DMatrix::from_fn(n, 2, |i, k| f64::from(cat(i) == k));
        let cov = CovariateTable::new(x, vec!["a".into(), "b".into()]).unwrap().infer_groups();
        let p = random_panel(seed, n0, n1, t0 + 1, t0, cov);
        let csc = fit_csc(&p, &EstimatorConfig::default()).unwrap();
        prop_assert_eq!(csc.weights.w.column(0), csc.weights.w.column(2));
    }

    #[test]
    fn fdid_translation_invariant(seed in any::<u64>(), (n0, n1, t, t0) in shape(), c in -100.0f64..100.0) {
        let p = random_panel(seed, n0.max(1), n1, t, t0, CovariateTable::empty(n0.max(1) + n1));
        let a = fit_fdid(&p).unwrap().att_pooled;
        let b = fit_fdid(&p.with_outcomes(p.outcomes().add_scalar(c)).unwrap()).unwrap().att_pooled;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn sc_scale_equivariance(seed in any::<u64>(), n0 in 2usize..6, n1 in 1usize..3, t0 in 1usize..5, s in 0.1f64..10.0) {
        let p = random_panel(seed, n0, n1, t0 + 1, t0, CovariateTable::empty(n0 + n1));
        let q = p.with_outcomes(p.outcomes() * s).unwrap();
        let wp = fit_pooled_sc(&p).unwrap();
        let wq = fit_pooled_sc(&q).unwrap();
        prop_assert!((wq.objective - s * s * wp.objective).abs() <= 1e-6 * (1.0 + wq.objective));
        // Weights may differ under multiplicity, so the counterfactual check
        // reuses the unscaled minimiser.
        let cp = predict_counterfactual(&p, &wp, None).unwrap();
        let scaled = predict_counterfactual(&q, &wp, None).unwrap();
        prop_assert!((&scaled - &cp * s).amax() <= 1e-9 * (1.0 + scaled.amax()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_panels_are_reproducible(seed in any::<u64>(), tau in -2.0f64..2.0) {
        let params = DgpParams { seed, tau, treatment_intercept: Some(-2.0), ..DgpParams::default() };
        let a = generate_panel(&params).unwrap();
        let b = generate_panel(&params).unwrap();
        prop_assert_eq!(&a, &b);
        let post = a.panel.blocks().y_n1_post.clone_owned();
        let gap = (post - &a.oracle_y0).map(|d| (d - tau).abs()).max();
        prop_assert!(gap <= 1e-12 * (1.0 + a.oracle_y0.amax()));
    }

    #[test]
    fn exact_fit_residual_is_zero(seed in any::<u64>(), n0 in 2usize..9, n1 in 1usize..5, f in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sp = generate_exact_fit_panel(n0, n1, f + 2, f, 1.0, 0.5, &mut rng).unwrap();
        let w = sp.w_star.as_ref().unwrap();
        let b = sp.panel.blocks();
        prop_assert!((b.y_n1_pre - w.tr_mul(&b.y_n0_pre)).amax() <= 1e-12);
    }
}

fn small_spec(reps: usize) -> SimulationSpec {
    SimulationSpec {
        dgp: DgpParams {
            n: 40,
            treatment_intercept: Some(-1.0),
            ..DgpParams::default()
        },
        reps,
        scenario_overrides: vec![
            ScenarioOverride::named("Baseline"),
            ScenarioOverride {
                random_assignment: true,
                ..ScenarioOverride::named("Random Assignment")
            },
        ],
        ..SimulationSpec::default()
    }
}

#[test]
fn simulation_is_deterministic_across_thread_counts() {
    let spec = small_spec(12);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_simulation(&spec).unwrap());
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_simulation(&spec).unwrap());
    assert_eq!(one, many);
    for row in &one {
        for m in &row.metrics {
            assert!(m.rmse_att_pooled.powi(2) >= m.avg_est_error.powi(2) - 1e-12);
            assert!(m.rmse_att >= m.avg_est_error.abs() - 1e-12, "{row:?}");
        }
    }
}
