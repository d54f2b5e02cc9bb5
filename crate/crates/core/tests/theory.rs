use csc_core::dgp::{
    calibrate_intercept, generate_exact_fit_panel, generate_exact_fit_panel_with, generate_panel_with_groups, DgpParams,
    ExactFitParams,
};
use csc_core::estimators::{fit, fit_fdid, EstimatorConfig, Method, WeightMatrix};
use csc_core::panel::{CovariateTable, PanelMatrix};
use csc_core::theory::*;
use csc_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_factors(t0: usize, f: usize) -> FactorSummary {
    FactorSummary::new(DMatrix::from_element(t0, f, 1.0), DVector::from_element(f, 1.0)).unwrap()
}

fn diverse_factors() -> FactorSummary {
    let pre = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 1.0, 2.0, 2.5, 0.5, 1.5]);
    FactorSummary::new(pre, DVector::from_vec(vec![2.0, -3.0])).unwrap()
}

fn star(sp: &csc_core::dgp::SimulatedPanel) -> WeightMatrix {
    WeightMatrix {
        w: sp.w_star.clone().unwrap(),
        provenance: Method::Csc,
        objective: 0.0,
    }
}

#[test]
fn factor_summary_extremes() {
    let fs = diverse_factors();
    assert_eq!((fs.lambda_min, fs.lambda_max), (0.5, 3.0));
    // Eigenvalues of L'L / 4 by the 2x2 closed form.
    let (a, b, d) = (
        (1.0 + 9.0 + 4.0 + 0.25) / 4.0,
        (2.0 + 3.0 + 5.0 + 0.75) / 4.0,
        (4.0 + 1.0 + 6.25 + 2.25) / 4.0,
    );
    let disc = (((a - d) / 2.0f64).powi(2) + b * b).sqrt();
    assert!((fs.phi_max - ((a + d) / 2.0 + disc)).abs() < 1e-12);
    assert!((fs.phi_min - ((a + d) / 2.0 - disc)).abs() < 1e-12);
    assert!(fs.invertible);
}

#[test]
fn unit_factor_bound_value() {
    let b = csc_error_bound(&unit_factors(2, 1), 1, 4, 2, 1.0, 1.0).unwrap();
    // sqrt(2*4/2 + 1/2^1.5) + 1 + sqrt(2)
    let expected = (4.0 + 1.0 / 8f64.sqrt()).sqrt() + 1.0 + 2f64.sqrt();
    assert!((b.bound - expected).abs() < 1e-12);
    assert!((b.bound - 4.5007).abs() < 1e-4, "{}", b.bound);
    assert_eq!(b.probability, 0.0);
}

#[test]
fn zero_sigma_and_zero_h() {
    let fs = diverse_factors();
    for h in [0.0, 1.0, 5.0] {
        assert_eq!(csc_error_bound(&fs, 2, 10, 4, 0.0, h).unwrap().bound, 0.0);
    }
    let b = csc_error_bound(&fs, 2, 10, 4, 1.5, 0.0).unwrap();
    assert_eq!(b.probability, 0.0);
    let first = 2.0 * 9.0 / fs.phi_min * (2.0 * 2.25 * 10.0 / 4.0f64).sqrt();
    assert!((b.bound - first).abs() < 1e-12);
}

#[test]
fn bound_rejects_bad_inputs() {
    let singular = FactorSummary::new(DMatrix::from_element(3, 2, 1.0), DVector::from_element(2, 1.0)).unwrap();
    assert!(!singular.invertible);
    assert!(matches!(
        csc_error_bound(&singular, 2, 5, 3, 1.0, 2.0),
        Err(Error::DegenerateFactor(_))
    ));
    let fs = diverse_factors();
    assert!(matches!(csc_error_bound(&fs, 4, 5, 4, 1.0, 2.0), Err(Error::Config(_))));
    assert!(matches!(csc_error_bound(&fs, 2, 5, 4, 1.0, -1.0), Err(Error::Config(_))));
}

#[test]
fn did_formula_examples() {
    let v = |x: &[f64]| DVector::from_column_slice(x);
    let e = did_asymptotic_error(&v(&[2.0]), &v(&[3.0]), &v(&[1.0]), &v(&[0.5]), 10).unwrap();
    assert!((e - 0.05).abs() < 1e-15);
    assert_eq!(did_asymptotic_error(&v(&[2.0, 1.0]), &v(&[3.0, 0.0]), &v(&[1.0, 2.0]), &v(&[1.0, 2.0]), 7).unwrap(), 0.0);
    assert_eq!(did_asymptotic_error(&v(&[2.0, 1.0]), &v(&[2.0, 1.0]), &v(&[1.0, 2.0]), &v(&[0.0, 0.0]), 7).unwrap(), 0.0);
    assert!(matches!(
        did_asymptotic_error(&v(&[1.0]), &v(&[1.0, 2.0]), &v(&[1.0]), &v(&[1.0]), 3),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(did_asymptotic_error(&v(&[1.0]), &v(&[1.0]), &v(&[1.0]), &v(&[1.0]), 0), Err(Error::Config(_))));
    let plim = did_probability_limit(&v(&[2.0]), &v(&[3.0]), &v(&[1.0]), &v(&[0.5])).unwrap();
    assert!((plim - 0.5).abs() < 1e-15);
}

fn cities_panel() -> PanelMatrix {
    PanelMatrix::new(
        DMatrix::from_row_slice(4, 3, &[400.0, 450.0, 470.0, 440.0, 510.0, 530.0, 500.0, 600.0, 650.0, 420.0, 480.0, 520.0]),
        ["A", "B", "C", "H"].iter().map(|s| s.to_string()).collect(),
        vec![1922, 1937, 1952],
        3,
        2,
        CovariateTable::empty(4),
        None,
    )
    .unwrap()
}

#[test]
fn exact_fit_checks() {
    let p = cities_panel();
    let half = WeightMatrix {
        w: DMatrix::from_column_slice(3, 1, &[0.5, 0.5, 0.0]),
        provenance: Method::SeparateSc,
        objective: 0.0,
    };
    let r = check_exact_fit(&p, &half, 1e-12).unwrap();
    assert_eq!(r.outcome_gap, 0.0);
    assert!(r.satisfied);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sp = generate_exact_fit_panel(6, 3, 4, 2, 1.0, 1.0, &mut rng).unwrap();
    let r = check_exact_fit(&sp.panel, &star(&sp), 1e-10).unwrap();
    assert!(r.satisfied, "{r:?}");

    let uniform = WeightMatrix {
        w: DMatrix::from_element(6, 3, 1.0 / 6.0),
        provenance: Method::PooledSc,
        objective: 0.0,
    };
    let r = check_exact_fit(&sp.panel, &uniform, 1e-10).unwrap();
    assert!(!r.satisfied && r.outcome_gap > 0.0 && r.covariate_gap > 0.0);
}

#[test]
fn representation_is_zero_without_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sp = generate_exact_fit_panel(5, 4, 3, 2, 0.0, 2.5, &mut rng).unwrap();
    let w = star(&sp);
    assert_eq!(abadie_representation_error(&sp, &w).unwrap(), 0.0);
    assert!(direct_estimation_error(&sp, &w).unwrap().abs() < 1e-9);
}

#[test]
fn representation_identity_sweep() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ExactFitParams {
            n0: 8,
            n1: 5,
            t0: 6,
            f: 3,
            sigma: 1.0,
            tau: 1.0,
            loading_shift: 1.0,
        };
        let sp = generate_exact_fit_panel_with(&params, &mut rng).unwrap();
        let w = star(&sp);
        let rhs = abadie_representation_error(&sp, &w).unwrap();
        let lhs = direct_estimation_error(&sp, &w).unwrap();
        assert!((rhs - lhs).abs() <= 1e-8, "seed {seed}: {rhs} vs {lhs}");
    }
}

#[test]
fn representation_needs_exact_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sp = generate_exact_fit_panel(6, 2, 4, 2, 1.0, 1.0, &mut rng).unwrap();
    let w = WeightMatrix {
        w: DMatrix::from_element(6, 2, 1.0 / 6.0),
        provenance: Method::PooledSc,
        objective: 0.0,
    };
    assert!(matches!(abadie_representation_error(&sp, &w), Err(Error::Precondition(_))));
}

fn city_instance(cities: usize, size: usize, t0: usize, n1: usize, seed: u64) -> PanelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let n0 = cities * size;
    let n = n0 + n1;
    let y = DMatrix::from_fn(n, t0 + 1, |i, t| {
        let level = if i < n0 { (i / size) as f64 } else { 1.0 };
        level + 0.3 * t as f64 * level + rng.gen_range(-1.0..1.0)
    });
    let labels = (0..n)
        .map(|i| if i < n0 { format!("c{}", i / size) } else { format!("t{}", (i - n0) / size) })
        .collect();
    PanelMatrix::new(
        y,
        (0..n).map(|i| format!("u{i}")).collect(),
        (1..=(t0 + 1) as i64).collect(),
        n0,
        t0,
        CovariateTable::empty(n),
        Some(labels),
    )
    .unwrap()
}

#[test]
fn city_equivalence_examples() {
    let r = verify_pooled_city_equivalence(&city_instance(2, 3, 5, 3, 1)).unwrap();
    assert!(r.objective_gap <= 1e-8, "{r:?}");
    let r = verify_pooled_city_equivalence(&city_instance(1, 4, 3, 4, 2)).unwrap();
    assert_eq!(r.city_weights, vec![1.0]);
    assert!(r.objective_gap <= 1e-8 && r.argmin_gap <= 1e-12, "{r:?}");
    let r = verify_pooled_city_equivalence(&city_instance(4, 2, 8, 4, 3)).unwrap();
    assert!(r.argmin_gap <= 1e-6, "{r:?}");
}

#[test]
fn city_equivalence_needs_balance() {
    let p = city_instance(2, 2, 4, 2, 0);
    let mut labels: Vec<String> = p.city_of().unwrap().to_vec();
    labels[1] = "c1".into();
    let q = p.with_cities(labels).unwrap();
    assert!(matches!(verify_pooled_city_equivalence(&q), Err(Error::Balance(_))));
}

/// Realized inputs of the two DiD error formulas for one simulated panel.
fn did_inputs(sp: &csc_core::dgp::SimulatedPanel) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let p = &sp.panel;
    let (n0, n1, t0) = (p.n0(), p.n1(), p.t0());
    let lambda_bar_pre = sp.lambda.rows(0, t0).row_mean().transpose();
    let lambda_t = sp.lambda.row(sp.lambda.nrows() - 1).transpose();
    let mu_don = sp.mu.rows(0, n0).row_mean().transpose();
    let mu_tr = sp.mu.rows(n0, n1).row_mean().transpose();
    (lambda_bar_pre, lambda_t, mu_don, mu_tr)
}

#[test]
fn did_error_matches_probability_limit() {
    let base = DgpParams::default();
    let params = DgpParams {
        treatment_intercept: Some(calibrate_intercept(&base).unwrap()),
        ..base
    };
    let mut gaps = Vec::new();
    for n1 in [50, 500, 5000] {
        let (mut err, mut lim, mut published) = (0.0, 0.0, 0.0);
        let reps = 40;
        for r in 0..reps {
            let sp = generate_panel_with_groups(&DgpParams { seed: 1000 + r, ..params.clone() }, 20, n1).unwrap();
            let att = fit_fdid(&sp.panel).unwrap();
            err += (att.att_pooled - sp.true_tau).abs();
            let (a, b, c, d) = did_inputs(&sp);
            lim += did_probability_limit(&a, &b, &c, &d).unwrap();
            published += did_asymptotic_error(&a, &b, &c, &d, 20).unwrap();
        }
        let (err, lim, published) = (err / reps as f64, lim / reps as f64, published / reps as f64);
        gaps.push((err - lim).abs() / lim);
        // The published closed form is smaller by the donor count.
        assert!((published * 20.0 - lim).abs() < 1e-9 * lim);
    }
    // Donor noise does not average out with n0 fixed, so the gap stays
    // small rather than vanishing.
    assert!(gaps.iter().all(|&g| g < 0.05), "{gaps:?}");
}

#[test]
fn csc_error_within_bound_on_exact_fit_instances() {
    let (n0, n1, t0, f, sigma, h) = (10, 4, 6, 2, 1.0, 3.0);
    let mut inside = 0;
    let draws = 60;
    let mut prob = 0.0;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sp = generate_exact_fit_panel(n0, n1, t0, f, sigma, 1.0, &mut rng).unwrap();
        let cfg = EstimatorConfig::new(Method::Csc).with_covariates(Vec::<String>::new());
        let est = fit(&sp.panel, &cfg, None).unwrap();
        let fs = FactorSummary::from_factors(&sp.lambda, t0).unwrap();
        let b = csc_error_bound(&fs, f, n0, t0, sigma, h).unwrap();
        prob = b.probability;
        inside += usize::from((est.att.att_pooled - sp.true_tau).abs() <= b.bound);
    }
    assert!(inside as f64 / draws as f64 >= prob);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_monotone(sigma in 0.1f64..3.0, n0 in 1usize..50, h in 0.0f64..5.0, t0 in 4usize..20, f in 1usize..3) {
        let fs = diverse_factors();
        let b = |f, n0, t0, sigma, h| csc_error_bound(&fs, f, n0, t0, sigma, h).unwrap().bound;
        let base = b(f, n0, t0, sigma, h);
        prop_assert!(b(f, n0, t0, sigma * 1.5, h) >= base);
        prop_assert!(b(f, n0 + 5, t0, sigma, h) >= base);
        prop_assert!(b(f, n0, t0, sigma, h + 0.5) >= base);
        prop_assert!(b(f + 1, n0, t0, sigma, h) >= base);
        prop_assert!(b(f, n0, t0 + 3, sigma, h) <= base);
    }

    #[test]
    fn probability_is_monotone_in_h(h in 0.0f64..10.0) {
        let fs = diverse_factors();
        let p = |h| csc_error_bound(&fs, 2, 5, 4, 1.0, h).unwrap().probability;
        prop_assert!(p(h + 0.1) >= p(h));
        prop_assert!((0.0..1.0).contains(&p(h)));
    }

    #[test]
    fn representation_identity(seed in any::<u64>(), n0 in 3usize..10, n1 in 1usize..6, extra in 1usize..4, f in 1usize..4, shift in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ExactFitParams { n0, n1, t0: f + extra, f, sigma: 1.0, tau: -0.5, loading_shift: shift };
        let sp = generate_exact_fit_panel_with(&params, &mut rng).unwrap();
        let w = star(&sp);
        let rhs = abadie_representation_error(&sp, &w).unwrap();
        let lhs = direct_estimation_error(&sp, &w).unwrap();
        prop_assert!((rhs - lhs).abs() <= 1e-8 * (1.0 + lhs.abs()), "{} vs {}", rhs, lhs);
    }
}
