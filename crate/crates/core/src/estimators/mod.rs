//! Synthetic-control family and difference-in-differences estimators.

mod ci;
mod csc;
mod did;
mod psc;
mod sc;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelMatrix;
use crate::qp::SolverOptions;

pub use ci::{group_att_ci, GroupCiReport, GroupInterval, CI_CAVEAT};
pub use csc::{fit_csc, treated_patterns, CscFit};
pub use did::{fit_fdid, fit_idid};
pub use psc::{fit_psc, PscFit, PSC_LAMBDA_GRID};
pub use sc::{fit_city_level_sc, fit_pooled_sc, fit_separate_sc, sc_objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SeparateSc,
    PooledSc,
    CitySc,
    Csc,
    Psc,
    Fdid,
    Idid,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SeparateSc,
        Method::PooledSc,
        Method::CitySc,
        Method::Csc,
        Method::Psc,
        Method::Fdid,
        Method::Idid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SeparateSc => "separate_sc",
            Method::PooledSc => "pooled_sc",
            Method::CitySc => "city_sc",
            Method::Csc => "csc",
            Method::Psc => "psc",
            Method::Fdid => "fdid",
            Method::Idid => "idid",
        }
    }

    pub fn uses_weights(self) -> bool {
        !matches!(self, Method::Fdid | Method::Idid)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .or(match key.as_str() {
                "separate" | "sc" => Some(Method::SeparateSc),
                "pooled" => Some(Method::PooledSc),
                "city" | "city_level_sc" => Some(Method::CitySc),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Penalty weight for the penalised synthetic control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LambdaRepr", into = "LambdaRepr")]
pub enum PscLambda {
    Fixed(f64),
    CrossValidated,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Num(f64),
    Text(String),
}

impl TryFrom<LambdaRepr> for PscLambda {
    type Error = String;

    fn try_from(r: LambdaRepr) -> std::result::Result<Self, String> {
        match r {
            LambdaRepr::Num(v) if v >= 0.0 && v.is_finite() => Ok(PscLambda::Fixed(v)),
            LambdaRepr::Num(v) => Err(format!("psc lambda must be a finite value >= 0, got {v}")),
            LambdaRepr::Text(s) if matches!(s.as_str(), "cv" | "cross_validated" | "crossval") => {
                Ok(PscLambda::CrossValidated)
            }
            LambdaRepr::Text(s) => s
                .parse::<f64>()
                .map_err(|_| format!("psc lambda must be a number or \"cv\", got `{s}`"))
                .and_then(|v| PscLambda::try_from(LambdaRepr::Num(v))),
        }
    }
}

impl From<PscLambda> for LambdaRepr {
    fn from(l: PscLambda) -> Self {
        match l {
            PscLambda::Fixed(v) => LambdaRepr::Num(v),
            PscLambda::CrossValidated => LambdaRepr::Text("cv".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Free per-unit intercept for CSC.
    pub use_intercept: bool,
    pub psc_lambda: PscLambda,
    /// Covariates to use; `None` means every covariate in the panel.
    pub covariate_names: Option<Vec<String>>,
    pub solver: SolverOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::Csc,
            use_intercept: false,
            psc_lambda: PscLambda::CrossValidated,
            covariate_names: None,
            solver: SolverOptions::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn with_covariates<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.covariate_names = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_intercept(mut self, on: bool) -> Self {
        self.use_intercept = on;
        self
    }

    pub fn with_psc_lambda(mut self, lambda: PscLambda) -> Self {
        self.psc_lambda = lambda;
        self
    }

    pub(crate) fn selected_covariates(&self, p: &PanelMatrix) -> Result<crate::panel::CovariateTable> {
        match &self.covariate_names {
            Some(names) => p.covariates().select(names),
            None => Ok(p.covariates().clone()),
        }
    }
}

/// Donor weights, one column per treated unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightMatrix {
    #[serde(serialize_with = "ser_matrix")]
    pub w: DMatrix<f64>,
    pub provenance: Method,
    /// Pre-treatment fit objective summed over treated units.
    pub objective: f64,
}

impl WeightMatrix {
    /// Largest deviation from the simplex over all columns.
    pub fn simplex_violation(&self) -> f64 {
        let mut worst = 0.0_f64;
        for col in self.w.column_iter() {
            worst = worst.max((col.sum() - 1.0).abs()).max(-col.min());
        }
        worst + 0.0
    }
}

/// Parameters of `w_ij = omega_j + x_i . alpha^j` (plus optional intercepts).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomCoefWeights {
    #[serde(serialize_with = "ser_vector")]
    pub omega: DVector<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub alpha: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    #[serde(serialize_with = "ser_opt_vector")]
    pub eta: Option<DVector<f64>>,
}

impl RandomCoefWeights {
    /// Weight column implied for a unit with covariates `x`.
    pub fn weights_for(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.omega + &self.alpha * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttEstimate {
    #[serde(serialize_with = "ser_vector")]
    pub att_by_period: DVector<f64>,
    pub att_pooled: f64,
    /// `n1 x post` matrix of `y_it(1) - yhat_it(0)`.
    #[serde(serialize_with = "ser_matrix")]
    pub individual_effects: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub counterfactuals: DMatrix<f64>,
}

/// Output of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub method: Method,
    pub att: AttEstimate,
    pub weights: Option<WeightMatrix>,
    pub coefficients: Option<RandomCoefWeights>,
    pub psc_lambda: Option<f64>,
}

/// `yhat_it(0) = eta_i + sum_j w_ij y_jt` over the post periods.
pub fn predict_counterfactual(
    p: &PanelMatrix,
    w: &WeightMatrix,
    eta: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    if w.w.shape() != (p.n0(), p.n1()) {
        return Err(Error::Dimension(format!(
            "weights are {:?}, panel needs ({}, {})",
            w.w.shape(),
            p.n0(),
            p.n1()
        )));
    }
    let post = p.blocks().y_n0_post;
    let mut out = w.w.tr_mul(&post);
    if let Some(eta) = eta {
        if eta.len() != p.n1() {
            return Err(Error::Dimension("one intercept per treated unit expected".into()));
        }
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.add_scalar_mut(eta[i]);
        }
    }
    Ok(out)
}

pub fn estimate_att(p: &PanelMatrix, counterfactuals: &DMatrix<f64>) -> Result<AttEstimate> {
    let observed = p.blocks().y_n1_post;
    if counterfactuals.shape() != observed.shape() {
        return Err(Error::Dimension(format!(
            "counterfactuals are {:?}, treated post block is {:?}",
            counterfactuals.shape(),
            observed.shape()
        )));
    }
    let effects = observed - counterfactuals;
    let n1 = effects.nrows() as f64;
    let by_period = DVector::from_fn(effects.ncols(), |t, _| effects.column(t).sum() / n1);
    Ok(AttEstimate {
        att_pooled: by_period.mean(),
        att_by_period: by_period,
        individual_effects: effects,
        counterfactuals: counterfactuals.clone(),
    })
}

/// Fits the configured estimator. `oracle` is the demeaned interactive
/// fixed-effect matrix required by [`Method::Idid`].
pub fn fit(p: &PanelMatrix, cfg: &EstimatorConfig, oracle: Option<&DMatrix<f64>>) -> Result<Fit> {
    let from_weights = |w: WeightMatrix, eta: Option<DVector<f64>>| -> Result<(AttEstimate, WeightMatrix)> {
        let cf = predict_counterfactual(p, &w, eta.as_ref())?;
        Ok((estimate_att(p, &cf)?, w))
    };
    let mut out = Fit {
        method: cfg.method,
        att: AttEstimate {
            att_by_period: DVector::zeros(0),
            att_pooled: 0.0,
            individual_effects: DMatrix::zeros(0, 0),
            counterfactuals: DMatrix::zeros(0, 0),
        },
        weights: None,
        coefficients: None,
        psc_lambda: None,
    };
    match cfg.method {
        Method::SeparateSc | Method::PooledSc | Method::CitySc => {
            let w = match cfg.method {
                Method::SeparateSc => fit_separate_sc(p)?,
                Method::PooledSc => fit_pooled_sc(p)?,
                _ => fit_city_level_sc(p)?,
            };
            let (att, w) = from_weights(w, None)?;
            out.att = att;
            out.weights = Some(w);
        }
        Method::Csc => {
            let fitted = fit_csc(p, cfg)?;
            let (att, w) = from_weights(fitted.weights, fitted.coefficients.eta.clone())?;
            out.att = att;
            out.weights = Some(w);
            out.coefficients = Some(fitted.coefficients);
        }
        Method::Psc => {
            let fitted = fit_psc(p, cfg)?;
            let (att, w) = from_weights(fitted.weights, None)?;
            out.att = att;
            out.weights = Some(w);
            out.psc_lambda = Some(fitted.lambda);
        }
        Method::Fdid => out.att = fit_fdid(p)?,
        Method::Idid => out.att = fit_idid(p, oracle)?,
    }
    Ok(out)
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

fn ser_vector<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

fn ser_opt_vector<S: serde::Serializer>(v: &Option<DVector<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovariateTable;

    fn panel(y: &[f64], n: usize, t: usize, n0: usize, t0: usize) -> PanelMatrix {
        PanelMatrix::new(
            DMatrix::from_row_slice(n, t, y),
            (0..n).map(|i| format!("u{i}")).collect(),
            (1..=t as i64).collect(),
            n0,
            t0,
            CovariateTable::empty(n),
            None,
        )
        .unwrap()
    }

    #[test]
    fn unit_vector_weights_copy_donor() {
        let p = panel(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 9.0], 3, 3, 2, 2);
        let w = WeightMatrix {
            w: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            provenance: Method::SeparateSc,
            objective: 0.0,
        };
        let cf = predict_counterfactual(&p, &w, Some(&DVector::from_element(1, 0.5))).unwrap();
        assert_eq!(cf[(0, 0)], 6.5);
    }

    #[test]
    fn att_is_mean_of_effects() {
        let p = panel(&[0.0, 0.0, 0.0, 1.0, 0.0, 3.0], 3, 2, 1, 1);
        let att = estimate_att(&p, &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(att.att_pooled, 2.0);
        let exact = estimate_att(&p, &DMatrix::from_column_slice(2, 1, &[1.0, 3.0])).unwrap();
        assert_eq!(exact.individual_effects, DMatrix::zeros(2, 1));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("CSC".parse::<Method>().unwrap(), Method::Csc);
        assert_eq!("city-sc".parse::<Method>().unwrap(), Method::CitySc);
        assert!("nope".parse::<Method>().is_err());
    }
}
