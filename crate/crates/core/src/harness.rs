//! Monte Carlo driver, metric tables and the cross-validation protocol.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{calibrate_intercept, dummy_covariate_names, generate_panel, DgpParams, SimulatedPanel};
use crate::error::{Error, Result};
use crate::estimators::{fit, EstimatorConfig, Method, PscLambda};
use crate::panel::{train_test_split, PanelMatrix};
use crate::qp::{SolverOptions, SolverStatus};

/// Column order of every emitted table.
pub const TABLE_METHODS: [Method; 4] = [Method::Csc, Method::Fdid, Method::Psc, Method::Idid];

/// How the simulated estimators are configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    /// Covariates given to CSC; `None` uses every dummy column of the panel.
    pub csc_covariates: Option<Vec<String>>,
    pub csc_intercept: bool,
    pub psc_covariates: Vec<String>,
    pub psc_lambda: PscLambda,
    pub solver: SolverOptions,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            csc_covariates: None,
            csc_intercept: true,
            psc_covariates: vec!["x1".into(), "x2".into()],
            psc_lambda: PscLambda::CrossValidated,
            solver: SolverOptions::default(),
        }
    }
}

impl EstimatorSettings {
    pub fn config_for(&self, method: Method, k_cat: usize) -> EstimatorConfig {
        let cfg = EstimatorConfig {
            method,
            solver: self.solver,
            ..EstimatorConfig::default()
        };
        match method {
            Method::Csc => EstimatorConfig {
                use_intercept: self.csc_intercept,
                covariate_names: Some(
                    self.csc_covariates
                        .clone()
                        .unwrap_or_else(|| dummy_covariate_names(k_cat)),
                ),
                ..cfg
            },
            Method::Psc => EstimatorConfig {
                psc_lambda: self.psc_lambda,
                covariate_names: Some(self.psc_covariates.clone()),
                ..cfg
            },
            _ => cfg,
        }
    }
}

/// A named change relative to the base parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioOverride {
    pub name: String,
    /// Sets `phi` to zero.
    pub random_assignment: bool,
    pub n: Option<usize>,
    pub e_pi: Option<f64>,
    pub t: Option<usize>,
    pub f: Option<usize>,
    pub phi_scale: Option<f64>,
}

impl ScenarioOverride {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn apply(&self, base: &DgpParams) -> DgpParams {
        let mut p = base.clone();
        if self.random_assignment {
            p.phi = vec![0.0; p.phi.len()];
        }
        if let Some(n) = self.n {
            p.n = n;
        }
        if let Some(e) = self.e_pi {
            p.e_pi = e;
        }
        if let Some(t) = self.t {
            p.t = t;
        }
        if let Some(f) = self.f {
            p.f = f;
        }
        if let Some(s) = self.phi_scale {
            p.phi_scale = s;
        }
        p
    }
}

/// The eleven rows of the estimation-error table, in order.
pub fn benchmark_scenarios() -> Vec<ScenarioOverride> {
    let o = ScenarioOverride::named;
    vec![
        o("Baseline"),
        ScenarioOverride {
            phi_scale: Some(0.25),
            ..o("Less Correlation")
        },
        ScenarioOverride {
            random_assignment: true,
            ..o("Random Assignment")
        },
        ScenarioOverride { n: Some(150), ..o("N=150") },
        ScenarioOverride { n: Some(200), ..o("N=200") },
        ScenarioOverride {
            e_pi: Some(0.25),
            ..o("E[pi]=0.25")
        },
        ScenarioOverride {
            e_pi: Some(0.40),
            ..o("E[pi]=0.40")
        },
        ScenarioOverride { t: Some(4), ..o("T=4") },
        ScenarioOverride { t: Some(8), ..o("T=8") },
        ScenarioOverride { f: Some(2), ..o("F=2") },
        ScenarioOverride { f: Some(4), ..o("F=4") },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub dgp: DgpParams,
    pub reps: usize,
    pub estimators: Vec<Method>,
    /// Empty means a single scenario named `Baseline` with no changes.
    pub scenario_overrides: Vec<ScenarioOverride>,
    pub settings: EstimatorSettings,
    /// Largest tolerated share of failed replications per scenario.
    pub max_failure_rate: f64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            dgp: DgpParams::default(),
            reps: 200,
            estimators: TABLE_METHODS.to_vec(),
            scenario_overrides: Vec::new(),
            settings: EstimatorSettings::default(),
            max_failure_rate: 0.05,
        }
    }
}

impl SimulationSpec {
    pub fn scenarios(&self) -> Vec<ScenarioOverride> {
        if self.scenario_overrides.is_empty() {
            vec![ScenarioOverride::named("Baseline")]
        } else {
            self.scenario_overrides.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        let scenarios = self.scenarios();
        for (k, s) in scenarios.iter().enumerate() {
            if scenarios[..k].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate scenario name `{}`", s.name)));
            }
            s.apply(&self.dgp).validate()?;
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::Config("max_failure_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub method: Method,
    /// Mean over replications of `tau_hat - tau`.
    pub avg_est_error: f64,
    /// Mean over replications of `|tau_hat - tau|`.
    pub avg_abs_error: f64,
    /// Root of the mean over replications of the per-replication mean squared
    /// unit-level effect error `(tau_hat_it - tau)^2`.
    pub rmse_att: f64,
    /// Root of the mean over replications of `(tau_hat - tau)^2`.
    pub rmse_att_pooled: f64,
    /// Mean over replications of the counterfactual RMSE over treated post cells.
    pub rmse_counterfactual: f64,
    /// Replications where this estimator failed.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub reps_used: usize,
    pub reps_failed: usize,
    pub mean_treated: f64,
    pub treatment_intercept: f64,
    pub metrics: Vec<EstimatorMetrics>,
}

impl MetricsRow {
    pub fn get(&self, method: Method) -> Option<&EstimatorMetrics> {
        self.metrics.iter().find(|m| m.method == method)
    }
}

/// One estimator on one replication.
#[derive(Debug, Clone, Copy)]
struct RepFit {
    error: f64,
    mse_cells: f64,
}

fn score(sp: &SimulatedPanel, cf: &DMatrix<f64>, att_pooled: f64) -> RepFit {
    let diff = cf - &sp.oracle_y0;
    RepFit {
        error: att_pooled - sp.true_tau,
        mse_cells: diff.norm_squared() / diff.len() as f64,
    }
}

/// Fits every selected estimator on one simulated panel.
fn run_rep(sp: &SimulatedPanel, methods: &[Method], settings: &EstimatorSettings, k_cat: usize) -> Vec<Result<RepFit>> {
    methods
        .iter()
        .map(|&m| {
            let cfg = settings.config_for(m, k_cat);
            let oracle = (m == Method::Idid).then_some(&sp.oracle_demeaned_ife);
            fit(&sp.panel, &cfg, oracle).map(|f| score(sp, &f.att.counterfactuals, f.att.att_pooled))
        })
        .collect()
}

/// Parameters of scenario `s`, with the treatment intercept calibrated once.
pub fn scenario_params(spec: &SimulationSpec, s: &ScenarioOverride) -> Result<DgpParams> {
    let mut params = s.apply(&spec.dgp);
    if params.treatment_intercept.is_none() {
        params.treatment_intercept = Some(calibrate_intercept(&params)?);
    }
    Ok(params)
}

/// Runs every scenario. Replication `r` uses seed `dgp.seed + r`, so results
/// do not depend on the number of worker threads. A replication where any
/// estimator fails is dropped for all of them.
pub fn run_simulation(spec: &SimulationSpec) -> Result<Vec<MetricsRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for scenario in spec.scenarios() {
        let params = scenario_params(spec, &scenario)?;
        let outcomes: Vec<Result<(usize, Vec<Result<RepFit>>)>> = (0..spec.reps)
            .into_par_iter()
            .map(|r| {
                let rep_params = DgpParams {
                    seed: params.seed.wrapping_add(r as u64),
                    ..params.clone()
                };
                let sp = generate_panel(&rep_params)?;
                Ok((sp.panel.n1(), run_rep(&sp, &spec.estimators, &spec.settings, params.k_cat)))
            })
            .collect();
        rows.push(aggregate(spec, &scenario.name, &params, outcomes)?);
    }
    Ok(rows)
}

fn aggregate(
    spec: &SimulationSpec,
    name: &str,
    params: &DgpParams,
    outcomes: Vec<Result<(usize, Vec<Result<RepFit>>)>>,
) -> Result<MetricsRow> {
    let k = spec.estimators.len();
    let mut failures = vec![0usize; k];
    let mut kept: Vec<Vec<RepFit>> = vec![Vec::new(); k];
    let mut failed_reps = 0;
    let mut treated = 0usize;
    let mut last_error = None;
    for outcome in outcomes {
        let (n1, fits) = outcome?;
        if fits.iter().any(|f| f.is_err()) {
            failed_reps += 1;
            for (m, f) in fits.into_iter().enumerate() {
                if let Err(e) = f {
                    failures[m] += 1;
                    last_error = Some(e);
                }
            }
            continue;
        }
        treated += n1;
        for (m, f) in fits.into_iter().enumerate() {
            kept[m].push(f.expect("checked"));
        }
    }
    let used = spec.reps - failed_reps;
    if failed_reps as f64 > spec.max_failure_rate * spec.reps as f64 || used == 0 {
        return Err(Error::Solver {
            unit: None,
            status: SolverStatus::MaxIterations,
            detail: format!(
                "scenario `{name}`: {failed_reps} of {} replications failed (last: {})",
                spec.reps,
                last_error.map(|e| e.to_string()).unwrap_or_default()
            ),
        });
    }
    let mean = |v: &mut dyn Iterator<Item = f64>| v.sum::<f64>() / used as f64;
    let metrics = spec
        .estimators
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let fits = &kept[m];
            EstimatorMetrics {
                method,
                avg_est_error: mean(&mut fits.iter().map(|f| f.error)),
                avg_abs_error: mean(&mut fits.iter().map(|f| f.error.abs())),
                rmse_att: mean(&mut fits.iter().map(|f| f.mse_cells)).sqrt(),
                rmse_att_pooled: mean(&mut fits.iter().map(|f| f.error * f.error)).sqrt(),
                rmse_counterfactual: mean(&mut fits.iter().map(|f| f.mse_cells.sqrt())),
                failures: failures[m],
            }
        })
        .collect();
    Ok(MetricsRow {
        scenario: name.to_string(),
        reps_used: used,
        reps_failed: failed_reps,
        mean_treated: treated as f64 / used as f64,
        treatment_intercept: params.treatment_intercept.unwrap_or(f64::NAN),
        metrics,
    })
}

/// Which metric a table reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMetric {
    AvgEstError,
    RmseCounterfactual,
    RmseAtt,
}

impl TableMetric {
    pub fn file_name(self) -> &'static str {
        match self {
            TableMetric::AvgEstError => "table_est_error",
            TableMetric::RmseCounterfactual => "table_rmse_counterfactual",
            TableMetric::RmseAtt => "table_rmse_att",
        }
    }

    pub fn value(self, m: &EstimatorMetrics) -> f64 {
        match self {
            TableMetric::AvgEstError => m.avg_est_error,
            TableMetric::RmseCounterfactual => m.rmse_counterfactual,
            TableMetric::RmseAtt => m.rmse_att,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Json,
    Text,
}

/// Renders one metric as a scenario x estimator table with columns in the
/// order CSC, fDiD, PSC, iDiD (estimators absent from a row are left blank).
/// The JSON format serialises the full rows instead.
pub fn emit_table(rows: &[MetricsRow], metric: TableMetric, format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("no rows to emit".into()));
    }
    let cell = |r: &MetricsRow, m: Method| r.get(m).map(|e| metric.value(e));
    match format {
        TableFormat::Json => serde_json::to_string_pretty(rows).map_err(|e| Error::Config(e.to_string())),
        TableFormat::Csv => {
            let mut out = String::from("scenario");
            for m in TABLE_METHODS {
                out.push(',');
                out.push_str(m.name());
            }
            out.push('\n');
            for r in rows {
                out.push_str(&csv_field(&r.scenario));
                for m in TABLE_METHODS {
                    out.push(',');
                    if let Some(v) = cell(r, m) {
                        out.push_str(&format!("{v}"));
                    }
                }
                out.push('\n');
            }
            Ok(out)
        }
        TableFormat::Text => {
            let width = rows.iter().map(|r| r.scenario.len()).max().unwrap_or(0).max(8);
            let mut out = format!("{:<width$}", "scenario");
            for m in TABLE_METHODS {
                out.push_str(&format!(" {:>9}", m.name()));
            }
            out.push('\n');
            for r in rows {
                out.push_str(&format!("{:<width$}", r.scenario));
                for m in TABLE_METHODS {
                    match cell(r, m) {
                        Some(v) => out.push_str(&format!(" {v:>9.3}")),
                        None => out.push_str(&format!(" {:>9}", "")),
                    }
                }
                out.push('\n');
            }
            Ok(out)
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Held-out error of one method for one training length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalRow {
    pub method: Method,
    pub t_train: usize,
    /// Held-out period label, or `None` for the pooled total.
    pub period: Option<i64>,
    pub rmse: f64,
}

/// For every method and training length: fit on the first `t_train`
/// pre-treatment periods, predict the remaining pre-treatment periods, and
/// report the RMSE per held-out period and pooled over them.
///
/// A cross-validated PSC penalty needs two training periods; with a single
/// one the penalty is fixed at zero.
pub fn run_crossval(
    p: &PanelMatrix,
    configs: &[EstimatorConfig],
    t_train_values: &[usize],
) -> Result<Vec<CrossvalRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        if cfg.method == Method::Idid {
            return Err(Error::Config("infeasible DiD cannot be cross-validated on observed data".into()));
        }
        for &t_train in t_train_values {
            let (train, held_out) = train_test_split(p, t_train)?;
            let mut cfg = cfg.clone();
            if cfg.method == Method::Psc && t_train < 2 && cfg.psc_lambda == PscLambda::CrossValidated {
                cfg.psc_lambda = PscLambda::Fixed(0.0);
            }
            let fitted = fit(&train, &cfg, None)?;
            let err = fitted.att.individual_effects;
            for (k, &period) in held_out.iter().enumerate() {
                let col = err.column(k);
                rows.push(CrossvalRow {
                    method: cfg.method,
                    t_train,
                    period: Some(p.periods()[period - 1]),
                    rmse: (col.norm_squared() / col.len() as f64).sqrt(),
                });
            }
            rows.push(CrossvalRow {
                method: cfg.method,
                t_train,
                period: None,
                rmse: (err.norm_squared() / err.len() as f64).sqrt(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eleven_scenarios_in_order() {
        let s = benchmark_scenarios();
        assert_eq!(s.len(), 11);
        assert_eq!(s[0].name, "Baseline");
        assert_eq!(s[2].name, "Random Assignment");
        assert_eq!(s[10].f, Some(4));
    }

    #[test]
    fn random_assignment_only_zeroes_phi() {
        let base = DgpParams::default();
        let p = benchmark_scenarios()[2].apply(&base);
        assert_eq!(p.phi, vec![0.0; 4]);
        assert_eq!(DgpParams { phi: base.phi.clone(), ..p }, base);
    }

    #[test]
    fn csv_header() {
        let row = MetricsRow {
            scenario: "Baseline".into(),
            reps_used: 1,
            reps_failed: 0,
            mean_treated: 1.0,
            treatment_intercept: 0.0,
            metrics: vec![],
        };
        let csv = emit_table(&[row], TableMetric::AvgEstError, TableFormat::Csv).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "scenario,csc,fdid,psc,idid");
    }
}
