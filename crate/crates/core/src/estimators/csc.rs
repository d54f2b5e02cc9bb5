use nalgebra::{DMatrix, DVector};

use super::sc::{donor_design, sc_objective};
use super::{EstimatorConfig, Method, RandomCoefWeights, WeightMatrix};
use crate::error::{Error, Result};
use crate::linalg::{range_basis, RANK_RTOL};
use crate::panel::{CovariateKind, PanelMatrix};
use crate::qp::kron::PatternLs;
use crate::qp::SolverStatus;

#[derive(Debug, Clone, PartialEq)]
pub struct CscFit {
    pub coefficients: RandomCoefWeights,
    pub weights: WeightMatrix,
    pub iterations: usize,
}

/// Distinct covariate rows in first-appearance order, the pattern index of
/// every row, and the pattern counts.
pub fn treated_patterns(x: &DMatrix<f64>) -> (Vec<DVector<f64>>, Vec<usize>, Vec<usize>) {
    let mut patterns: Vec<DVector<f64>> = Vec::new();
    let mut counts = Vec::new();
    let mut member = Vec::with_capacity(x.nrows());
    for row in x.row_iter() {
        let row = row.transpose();
        match patterns.iter().position(|p| *p == row) {
            Some(g) => {
                counts[g] += 1;
                member.push(g);
            }
            None => {
                member.push(patterns.len());
                patterns.push(row);
                counts.push(1);
            }
        }
    }
    (patterns, member, counts)
}

/// Correlated synthetic control: weights `w_ij = omega_j + x_i . alpha^j`
/// restricted to the simplex for every treated unit.
pub fn fit_csc(p: &PanelMatrix, cfg: &EstimatorConfig) -> Result<CscFit> {
    let cov = cfg.selected_covariates(p)?;
    if p.n1() >= 2 {
        if let Some(k) = cov.kinds().iter().position(|&k| k == CovariateKind::Continuous) {
            return Err(Error::ContinuousCovariate(cov.names()[k].clone()));
        }
    }
    let (n0, n1, k) = (p.n0(), p.n1(), cov.len());
    let x_treated = cov.values().rows(n0, n1).into_owned();
    let (patterns, member, counts) = treated_patterns(&x_treated);
    let g = patterns.len();

    let z = DMatrix::from_fn(k + 1, g, |r, c| if r == 0 { 1.0 } else { patterns[c][r - 1] });
    let q = range_basis(&z, RANK_RTOL);
    let coords = q.tr_mul(&z);

    let mut donors = donor_design(p);
    let pre = p.blocks().y_n1_pre;
    let mut targets: DMatrix<f64> = DMatrix::zeros(p.t0(), g);
    for (i, &gi) in member.iter().enumerate() {
        for t in 0..p.t0() {
            targets[(t, gi)] += pre[(i, t)] / counts[gi] as f64;
        }
    }
    if cfg.use_intercept {
        for mut col in donors.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        for mut col in targets.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
    }

    let problem = PatternLs {
        donors: &donors,
        targets,
        counts: counts.iter().map(|&c| c as f64).collect(),
        coords,
    };
    let sol = problem.solve(&cfg.solver)?;
    if sol.status != SolverStatus::Converged {
        return Err(Error::Solver {
            unit: None,
            status: sol.status,
            detail: format!("CSC weights after {} iterations", sol.iterations),
        });
    }

    let w = DMatrix::from_fn(n0, n1, |j, i| sol.weights[(j, member[i])]);
    let full = &sol.coef * q.transpose();
    let omega = full.column(0).into_owned();
    let alpha = full.columns(1, k).into_owned();
    let eta = cfg.use_intercept.then(|| {
        let fit = pre - w.tr_mul(&p.blocks().y_n0_pre);
        fit.column_mean()
    });
    let objective = sc_objective(p, &w, eta.as_ref());
    Ok(CscFit {
        coefficients: RandomCoefWeights {
            omega,
            alpha,
            covariate_names: cov.names().to_vec(),
            eta,
        },
        weights: WeightMatrix {
            w,
            provenance: Method::Csc,
            objective,
        },
        iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{fit_pooled_sc, fit_separate_sc};
    use crate::panel::CovariateTable;

    fn toy(n0: usize, n1: usize, t: usize, cov: CovariateTable) -> PanelMatrix {
        let mut s = 11u64;
        let y = DMatrix::from_fn(n0 + n1, t, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 10.0
        });
        PanelMatrix::new(
            y,
            (0..n0 + n1).map(|i| format!("u{i}")).collect(),
            (1..=t as i64).collect(),
            n0,
            t - 1,
            cov,
            None,
        )
        .unwrap()
    }

    #[test]
    fn no_covariates_is_pooled() {
        let p = toy(6, 3, 5, CovariateTable::empty(9));
        let csc = fit_csc(&p, &EstimatorConfig::default()).unwrap();
        let pooled = fit_pooled_sc(&p).unwrap();
        assert!((csc.weights.objective - pooled.objective).abs() < 1e-6);
    }

    #[test]
    fn unit_dummies_are_separate() {
        let n0 = 6;
        let n1 = 3;
        let values = DMatrix::from_fn(n0 + n1, n1, |i, k| if i == n0 + k { 1.0 } else { 0.0 });
        let names = (0..n1).map(|k| format!("unit{k}")).collect();
        let p = toy(n0, n1, 5, CovariateTable::new(values, names).unwrap());
        let csc = fit_csc(&p, &EstimatorConfig::default()).unwrap();
        let sep = fit_separate_sc(&p).unwrap();
        assert!((csc.weights.objective - sep.objective).abs() < 1e-6);
    }

    #[test]
    fn continuous_covariate_rejected() {
        let values = DMatrix::from_fn(8, 1, |i, _| i as f64 * 0.37);
        let p = toy(5, 3, 4, CovariateTable::new(values, vec!["income".into()]).unwrap());
        let err = fit_csc(&p, &EstimatorConfig::default()).unwrap_err();
        assert_eq!(err, Error::ContinuousCovariate("income".into()));
    }

    #[test]
    fn intercept_absorbs_level_shift() {
        let p = toy(5, 1, 5, CovariateTable::empty(6));
        let mut y = p.outcomes().clone();
        // Treated unit = donor 2 + 100.
        for t in 0..5 {
            y[(5, t)] = y[(2, t)] + 100.0;
        }
        let p = p.with_outcomes(y).unwrap();
        let fit = fit_csc(&p, &EstimatorConfig::default().with_intercept(true)).unwrap();
        assert!(fit.weights.objective < 1e-9);
        assert!((fit.coefficients.eta.unwrap()[0] - 100.0).abs() < 1e-6);
    }
}
