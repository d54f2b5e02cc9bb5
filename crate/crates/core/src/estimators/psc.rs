use nalgebra::{DMatrix, DVector};

use super::sc::sc_objective;
use super::{EstimatorConfig, Method, PscLambda, WeightMatrix};
use crate::error::{Error, Result};
use crate::panel::PanelMatrix;
use crate::qp::solve_simplex_qp;

/// Penalty values tried by cross-validation, in order (ties keep the first).
pub const PSC_LAMBDA_GRID: [f64; 6] = [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PscFit {
    pub weights: WeightMatrix,
    pub lambda: f64,
    /// Held-out squared error per grid value when cross-validated.
    pub cv_errors: Option<Vec<f64>>,
}

/// Per-unit data: outcome periods `0..t_fit` stacked over covariates.
struct Stacked {
    /// `(t_fit + K) x n0`.
    donors: DMatrix<f64>,
    /// `(t_fit + K) x n1`.
    treated: DMatrix<f64>,
}

fn stack(p: &PanelMatrix, x: &DMatrix<f64>, t_fit: usize) -> Stacked {
    let (n0, n1, k) = (p.n0(), p.n1(), x.ncols());
    let y = p.outcomes();
    let rows = t_fit + k;
    let donors = DMatrix::from_fn(rows, n0, |r, j| if r < t_fit { y[(j, r)] } else { x[(j, r - t_fit)] });
    let treated = DMatrix::from_fn(rows, n1, |r, i| {
        if r < t_fit {
            y[(n0 + i, r)]
        } else {
            x[(n0 + i, r - t_fit)]
        }
    });
    Stacked { donors, treated }
}

fn solve_all(s: &Stacked, lambda: f64, cfg: &EstimatorConfig) -> Result<DMatrix<f64>> {
    let n0 = s.donors.ncols();
    let n1 = s.treated.ncols();
    let mut w = DMatrix::zeros(n0, n1);
    for i in 0..n1 {
        let target = s.treated.column(i).into_owned();
        let penalty = DVector::from_fn(n0, |j, _| lambda * (s.donors.column(j) - &target).norm_squared());
        let rep = solve_simplex_qp(&s.donors, &target, Some(&penalty), &cfg.solver)
            .and_then(|r| r.into_result())
            .map_err(|e| e.with_unit(i))?;
        w.set_column(i, &rep.solution_vector());
    }
    Ok(w)
}

/// Penalised synthetic control: per treated unit, the simplex fit on outcomes
/// and covariates plus `lambda * sum_j w_j * ||z_i - z_j||^2`.
pub fn fit_psc(p: &PanelMatrix, cfg: &EstimatorConfig) -> Result<PscFit> {
    let x = cfg.selected_covariates(p)?.values().clone();
    let t0 = p.t0();
    let (lambda, cv_errors) = match cfg.psc_lambda {
        PscLambda::Fixed(l) if l >= 0.0 && l.is_finite() => (l, None),
        PscLambda::Fixed(l) => return Err(Error::Config(format!("psc lambda must be >= 0, got {l}"))),
        PscLambda::CrossValidated => {
            if t0 < 2 {
                return Err(Error::Config(
                    "cross-validating the penalty needs at least two pre-treatment periods".into(),
                ));
            }
            let s = stack(p, &x, t0 - 1);
            let y = p.outcomes();
            let mut errors = Vec::with_capacity(PSC_LAMBDA_GRID.len());
            for &l in &PSC_LAMBDA_GRID {
                let w = solve_all(&s, l, cfg)?;
                let err: f64 = (0..p.n1())
                    .map(|i| {
                        let pred: f64 = (0..p.n0()).map(|j| w[(j, i)] * y[(j, t0 - 1)]).sum();
                        (y[(p.n0() + i, t0 - 1)] - pred).powi(2)
                    })
                    .sum();
                errors.push(err);
            }
            let best = errors
                .iter()
                .enumerate()
                .fold(0, |b, (k, &e)| if e < errors[b] { k } else { b });
            (PSC_LAMBDA_GRID[best], Some(errors))
        }
    };
    let w = solve_all(&stack(p, &x, t0), lambda, cfg)?;
    Ok(PscFit {
        weights: WeightMatrix {
            objective: sc_objective(p, &w, None),
            w,
            provenance: Method::Psc,
        },
        lambda,
        cv_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovariateTable;

    /// Two treated-like rows (Tobi, then Mobarak) with donors Max, Dirk, Micol, Yi.
    fn tobi_panel() -> PanelMatrix {
        let y = DMatrix::from_row_slice(6, 3, &[
            11.0, 13.0, 0.0, //
            9.0, 10.0, 0.0, //
            13.0, 17.0, 0.0, //
            18.0, 30.0, 0.0, //
            12.0, 15.0, 0.0, //
            21.0, 23.0, 0.0,
        ]);
        let edu = DMatrix::from_column_slice(6, 1, &[12.0, 9.0, 10.0, 15.0, 11.0, 12.0]);
        PanelMatrix::new(
            y,
            ["Max", "Dirk", "Micol", "Yi", "Tobi", "Mobarak"].map(String::from).to_vec(),
            vec![1978, 1979, 1980],
            4,
            2,
            CovariateTable::new(edu, vec!["education".into()]).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn penalty_picks_the_closer_exact_fit() {
        let p = tobi_panel();
        let cfg = EstimatorConfig::new(Method::Psc).with_psc_lambda(PscLambda::Fixed(1e-3));
        let fit = fit_psc(&p, &cfg).unwrap();
        let w = fit.weights.w.column(0);
        assert!((w[0] - 0.5).abs() < 1e-3 && (w[2] - 0.5).abs() < 1e-3, "{w}");
        assert!(w[1] + w[3] < 1e-9);
    }

    #[test]
    fn huge_penalty_picks_nearest_donor() {
        let p = tobi_panel();
        let cfg = EstimatorConfig::new(Method::Psc).with_psc_lambda(PscLambda::Fixed(1e6));
        let w = fit_psc(&p, &cfg).unwrap().weights.w;
        // Mobarak (21, 23, 12): squared distances 200, 322, 104, 67 -> Yi.
        assert!((w[(3, 1)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_validation_needs_two_pre_periods() {
        let p = tobi_panel();
        let (train, _) = crate::panel::train_test_split(&p, 1).unwrap();
        let cfg = EstimatorConfig::new(Method::Psc);
        assert!(matches!(fit_psc(&train, &cfg), Err(Error::Config(_))));
        assert!(fit_psc(&p, &cfg).unwrap().cv_errors.unwrap().len() == 6);
    }
}
