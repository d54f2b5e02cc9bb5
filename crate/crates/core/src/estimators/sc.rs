use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{Method, WeightMatrix};
use crate::error::{Error, Result};
use crate::panel::PanelMatrix;
use crate::qp::solve_simplex_ls;

/// Pre-period donor series as columns (`t0 x n0`).
pub(crate) fn donor_design(p: &PanelMatrix) -> DMatrix<f64> {
    p.blocks().y_n0_pre.transpose()
}

/// `sum_i ||y_i,pre - eta_i - Y0' w_i||^2`.
pub fn sc_objective(p: &PanelMatrix, w: &DMatrix<f64>, eta: Option<&DVector<f64>>) -> f64 {
    let b = p.blocks();
    let mut fit = b.y_n1_pre - w.tr_mul(&b.y_n0_pre);
    if let Some(eta) = eta {
        for (i, mut row) in fit.row_iter_mut().enumerate() {
            row.add_scalar_mut(-eta[i]);
        }
    }
    fit.norm_squared()
}

/// One simplex regression per treated unit.
pub fn fit_separate_sc(p: &PanelMatrix) -> Result<WeightMatrix> {
    let donors = donor_design(p);
    let b = p.blocks();
    let mut w = DMatrix::zeros(p.n0(), p.n1());
    let mut objective = 0.0;
    for i in 0..p.n1() {
        let target = b.y_n1_pre.row(i).transpose();
        let rep = solve_simplex_ls(&donors, &target)
            .and_then(|r| r.into_result())
            .map_err(|e| e.with_unit(i))?;
        objective += rep.objective;
        w.set_column(i, &rep.solution_vector());
    }
    Ok(WeightMatrix {
        w,
        provenance: Method::SeparateSc,
        objective,
    })
}

/// One weight vector shared by all treated units.
///
/// The pooled objective equals `n1 ||ybar - Y0 w||^2` plus a constant, so the
/// mean treated series is fitted.
pub fn fit_pooled_sc(p: &PanelMatrix) -> Result<WeightMatrix> {
    let donors = donor_design(p);
    let b = p.blocks();
    let mean = b.y_n1_pre.row_mean().transpose();
    let rep = solve_simplex_ls(&donors, &mean)?.into_result()?;
    let col = rep.solution_vector();
    let w = DMatrix::from_fn(p.n0(), p.n1(), |j, _| col[j]);
    Ok(WeightMatrix {
        objective: sc_objective(p, &w, None),
        w,
        provenance: Method::PooledSc,
    })
}

/// Donor cities in first-appearance order with their member rows.
pub(crate) struct CityLayout {
    pub donor_cities: Vec<(String, Vec<usize>)>,
    pub size: usize,
}

pub(crate) fn city_layout(p: &PanelMatrix) -> Result<CityLayout> {
    let cities = p
        .city_of()
        .ok_or_else(|| Error::Config("city labels are required for city-level SC".into()))?;
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (i, c) in cities.iter().enumerate() {
        let entry = members.entry(c.as_str()).or_default();
        if entry.is_empty() {
            order.push(c.as_str());
        }
        entry.push(i);
    }
    let size = members[order[0]].len();
    for c in &order {
        let rows = &members[c];
        if rows.len() != size {
            return Err(Error::Balance(format!(
                "city `{c}` has {} units, expected {size}",
                rows.len()
            )));
        }
        let treated = rows.iter().filter(|&&i| p.is_treated_unit(i)).count();
        if treated != 0 && treated != rows.len() {
            return Err(Error::Config(format!("city `{c}` mixes donors and treated units")));
        }
    }
    let donor_cities = order
        .iter()
        .filter(|c| !p.is_treated_unit(members[*c][0]))
        .map(|c| (c.to_string(), members[c].clone()))
        .collect();
    Ok(CityLayout { donor_cities, size })
}

/// City-mean donor series as columns (`t0 x D`).
pub(crate) fn city_design(p: &PanelMatrix, layout: &CityLayout) -> DMatrix<f64> {
    let pre = p.blocks().y_n0_pre;
    DMatrix::from_fn(p.t0(), layout.donor_cities.len(), |t, d| {
        let rows = &layout.donor_cities[d].1;
        rows.iter().map(|&j| pre[(j, t)]).sum::<f64>() / rows.len() as f64
    })
}

/// Weights fitted on city means and split equally within each donor city.
pub fn fit_city_level_sc(p: &PanelMatrix) -> Result<WeightMatrix> {
    let layout = city_layout(p)?;
    let design = city_design(p, &layout);
    let mean = p.blocks().y_n1_pre.row_mean().transpose();
    let rep = solve_simplex_ls(&design, &mean)?.into_result()?;
    let wd = rep.solution_vector();
    let mut col = DVector::zeros(p.n0());
    for (d, (_, rows)) in layout.donor_cities.iter().enumerate() {
        for &j in rows {
            col[j] = wd[d] / layout.size as f64;
        }
    }
    let w = DMatrix::from_fn(p.n0(), p.n1(), |j, _| col[j]);
    Ok(WeightMatrix {
        objective: sc_objective(p, &w, None),
        w,
        provenance: Method::CitySc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovariateTable;

    fn cities_panel() -> PanelMatrix {
        // Donors A, B, C and treated H over 1922, 1937, 1952.
        PanelMatrix::new(
            DMatrix::from_row_slice(4, 3, &[
                400.0, 450.0, 470.0, //
                440.0, 510.0, 530.0, //
                500.0, 600.0, 650.0, //
                420.0, 480.0, 520.0,
            ]),
            vec!["A".into(), "B".into(), "C".into(), "H".into()],
            vec![1922, 1937, 1952],
            3,
            2,
            CovariateTable::empty(4),
            None,
        )
        .unwrap()
    }

    #[test]
    fn exact_fit_on_multiplicity_instance() {
        let w = fit_separate_sc(&cities_panel()).unwrap();
        assert!(w.objective < 1e-12);
        assert!(w.simplex_violation() < 1e-12);
    }

    #[test]
    fn pooled_equals_separate_for_single_unit() {
        let p = cities_panel();
        let a = fit_separate_sc(&p).unwrap();
        let b = fit_pooled_sc(&p).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-9);
    }

    #[test]
    fn unequal_cities_rejected() {
        let p = cities_panel()
            .with_cities(vec!["x".into(), "x".into(), "y".into(), "h".into()])
            .unwrap();
        assert!(matches!(fit_city_level_sc(&p), Err(Error::Balance(_))));
        let q = cities_panel();
        assert!(matches!(fit_city_level_sc(&q), Err(Error::Config(_))));
    }

    #[test]
    fn one_donor_city_splits_evenly() {
        let y = DMatrix::from_row_slice(4, 3, &[
            1.0, 2.0, 3.0, //
            3.0, 2.0, 1.0, //
            2.0, 2.0, 2.0, //
            2.5, 1.5, 2.0,
        ]);
        let p = PanelMatrix::new(
            y,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![1, 2, 3],
            2,
            2,
            CovariateTable::empty(4),
            Some(vec!["x".into(), "x".into(), "h".into(), "h".into()]),
        )
        .unwrap();
        let w = fit_city_level_sc(&p).unwrap();
        assert_eq!(w.w, DMatrix::from_element(2, 2, 0.5));
    }
}
