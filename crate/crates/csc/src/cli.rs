use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use csc_core::dgp::generate_panel;
use csc_core::estimators::{fit, group_att_ci, EstimatorConfig, Method, PscLambda};
use csc_core::harness::{emit_table, run_crossval, run_simulation, MetricsRow, TableFormat, TableMetric};
use csc_core::panel::{CovariateKind, PanelMatrix, TreatmentOverride};
use csc_core::theory::csc_error_bound;
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::io::{load_csv, save_csv, LoadOptions};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "csc", version, about = "Correlated synthetic controls and comparison estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Monte Carlo benchmark and write the result tables.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one estimator to a panel CSV.
    Estimate {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        method: String,
        /// Covariates entering the CSC weights (default: all dummies).
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
        /// Add a per-treated-unit intercept to CSC.
        #[arg(long)]
        intercept: bool,
        /// Penalty for PSC: `cv` or a number.
        #[arg(long, default_value = "cv")]
        psc_lambda: String,
        /// Report per-group intervals, grouping treated units by `city` or a covariate.
        #[arg(long)]
        group_by: Option<String>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// JSON output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the CSC error bound for the `[bound]` section of a config.
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
    /// Hold out the last pre-treatment periods and report prediction RMSE.
    Crossval {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        train_lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "csc,psc")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
        #[arg(long)]
        intercept: bool,
        /// `.csv` writes CSV, anything else JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one simulated panel and write it as CSV.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    /// Long-format CSV: unit_id,time,outcome,treated[,city][,x_<name>...]
    #[arg(long)]
    pub panel: PathBuf,
    /// Transform outcomes to ln(1 + y) on load.
    #[arg(long)]
    pub log1p: bool,
    /// Treated units, for files without a treated column.
    #[arg(long, value_delimiter = ',', requires = "first_treated")]
    pub treated_units: Option<Vec<String>>,
    #[arg(long, requires = "treated_units")]
    pub first_treated: Option<i64>,
}

impl PanelArgs {
    fn load(&self) -> Result<PanelMatrix> {
        let opts = LoadOptions {
            treatment_override: self.treated_units.clone().map(|treated_units| TreatmentOverride {
                treated_units,
                first_treated_period: self.first_treated.expect("clap enforces the pair"),
            }),
            log1p: self.log1p,
            ..LoadOptions::default()
        };
        load_csv(&self.panel, &opts)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, reps, seed, out } => simulate(config.as_deref(), reps, seed, &out),
        Command::Estimate {
            panel,
            method,
            covariates,
            intercept,
            psc_lambda,
            group_by,
            level,
            out,
        } => {
            let p = panel.load()?;
            let cfg = estimator_config(&p, &method, covariates, intercept, &psc_lambda)?;
            let report = estimate(&p, &cfg, group_by.as_deref(), level)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => write_file(&path, &text),
                None => stdout(&text),
            }
        }
        Command::Bound { config } => stdout(&serde_json::to_string_pretty(&bound(&config)?)?),
        Command::Crossval {
            panel,
            train_lengths,
            methods,
            covariates,
            intercept,
            out,
        } => {
            let p = panel.load()?;
            let configs = methods
                .iter()
                .map(|m| estimator_config(&p, m, covariates.clone(), intercept, "cv"))
                .collect::<Result<Vec<_>>>()?;
            let rows = run_crossval(&p, &configs, &train_lengths)?;
            let text = if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                let mut s = String::from("method,t_train,period,rmse\n");
                for r in &rows {
                    let period = r.period.map_or("total".to_string(), |v| v.to_string());
                    s.push_str(&format!("{},{},{period},{}\n", r.method, r.t_train, r.rmse));
                }
                s
            } else {
                serde_json::to_string_pretty(&rows)?
            };
            write_file(&out, &text)
        }
        Command::Generate { config, seed, out } => {
            let mut params = load_config(config.as_deref())?.simulation_spec().dgp;
            if let Some(s) = seed {
                params.seed = s;
            }
            save_csv(&out, &generate_panel(&params)?.panel)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
}

/// Prints `text` and a newline; a closed pipe is not an error.
fn stdout(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>")(e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn simulate(config: Option<&Path>, reps: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = load_config(config)?.simulation_spec();
    if let Some(r) = reps {
        spec.reps = r;
    }
    if let Some(s) = seed {
        spec.dgp.seed = s;
    }
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;

    let start = Instant::now();
    let rows = run_simulation(&spec)?;
    let elapsed = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let metrics = [TableMetric::AvgEstError, TableMetric::RmseCounterfactual, TableMetric::RmseAtt];
    for m in metrics {
        write_file(&out.join(format!("{}.csv", m.file_name())), &emit_table(&rows, m, TableFormat::Csv)?)?;
    }
    let manifest = json!({
        "seed": spec.dgp.seed,
        "reps": spec.reps,
        "versions": { "csc": VERSION, "csc_core": csc_core::VERSION },
        "elapsed_seconds": elapsed,
        "tables": metrics.iter().map(|m| format!("{}.csv", m.file_name())).collect::<Vec<_>>(),
        "scenarios": rows.iter().map(scenario_summary).collect::<Vec<_>>(),
        "spec": spec,
    });
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    stdout(emit_table(&rows, TableMetric::AvgEstError, TableFormat::Text)?.trim_end())
}

fn scenario_summary(r: &MetricsRow) -> Value {
    let failures: BTreeMap<String, usize> = r.metrics.iter().map(|m| (m.method.to_string(), m.failures)).collect();
    json!({
        "scenario": r.scenario,
        "reps_used": r.reps_used,
        "reps_failed": r.reps_failed,
        "estimator_failures": failures,
        "treatment_intercept": r.treatment_intercept,
        "mean_treated": r.mean_treated,
    })
}

fn estimator_config(
    p: &PanelMatrix,
    method: &str,
    covariates: Option<Vec<String>>,
    intercept: bool,
    psc_lambda: &str,
) -> Result<EstimatorConfig> {
    let method: Method = method.parse().map_err(|e: csc_core::Error| Error::Usage(e.to_string()))?;
    if method == Method::Idid {
        return Err(Error::Usage("idid needs the true factor structure and only runs inside `simulate`".into()));
    }
    let lambda = match psc_lambda {
        "cv" => PscLambda::CrossValidated,
        v => PscLambda::Fixed(
            v.parse()
                .ok()
                .filter(|l: &f64| l.is_finite() && *l >= 0.0)
                .ok_or_else(|| Error::Usage(format!("--psc-lambda must be `cv` or a nonnegative number, got `{v}`")))?,
        ),
    };
    let mut cfg = EstimatorConfig::new(method).with_intercept(intercept).with_psc_lambda(lambda);
    if let Some(names) = covariates {
        if let Some(bad) = names.iter().find(|n| p.covariates().index_of(n).is_none()) {
            return Err(Error::Usage(format!(
                "unknown covariate `{bad}`; the panel has {:?}",
                p.covariates().names()
            )));
        }
        cfg = cfg.with_covariates(names);
    } else if method == Method::Csc {
        let cov = p.covariates();
        let dummies = cov.names().iter().zip(cov.kinds()).filter(|(_, &k)| k == CovariateKind::Dummy);
        cfg = cfg.with_covariates(dummies.map(|(n, _)| n.clone()));
    }
    Ok(cfg)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn estimate(p: &PanelMatrix, cfg: &EstimatorConfig, group_by: Option<&str>, level: f64) -> Result<Value> {
    let fitted = fit(p, cfg, None)?;
    let (n0, t0) = (p.n0(), p.t0());
    let donors = &p.unit_ids()[..n0];
    let treated = &p.unit_ids()[n0..];
    let post = &p.periods()[t0..];
    let att = &fitted.att;

    let weights = fitted.weights.as_ref().map(|w| {
        let per_unit: Vec<Value> = treated
            .iter()
            .enumerate()
            .map(|(j, u)| {
                let col: BTreeMap<&str, f64> =
                    donors.iter().zip(w.w.column(j).iter()).map(|(d, &v)| (d.as_str(), v)).collect();
                json!({ "unit": u, "weights": col })
            })
            .collect();
        json!({ "objective": w.objective, "simplex_violation": w.simplex_violation(), "by_treated_unit": per_unit })
    });
    let groups = match group_by {
        None => None,
        Some(key) => {
            let labels = group_labels(p, key)?;
            Some(group_att_ci(att, &labels, level)?)
        }
    };
    Ok(json!({
        "method": fitted.method,
        "config": cfg,
        "panel": {
            "n0": n0,
            "n1": p.n1(),
            "t0": t0,
            "periods": p.periods(),
            "donors": donors,
            "treated": treated,
        },
        "att": {
            "pooled": att.att_pooled,
            "by_period": post.iter().zip(att.att_by_period.iter())
                .map(|(t, v)| json!({ "period": t, "att": v })).collect::<Vec<_>>(),
        },
        "weights": weights,
        "coefficients": fitted.coefficients,
        "psc_lambda": fitted.psc_lambda,
        "individual_effects": treated.iter().zip(rows(&att.individual_effects))
            .map(|(u, e)| json!({ "unit": u, "effects": e })).collect::<Vec<_>>(),
        "counterfactuals": treated.iter().zip(rows(&att.counterfactuals))
            .map(|(u, y)| json!({ "unit": u, "y0": y })).collect::<Vec<_>>(),
        "group_intervals": groups,
    }))
}

fn group_labels(p: &PanelMatrix, key: &str) -> Result<Vec<String>> {
    let n0 = p.n0();
    if key == "city" {
        return p
            .city_of()
            .map(|c| c[n0..].to_vec())
            .ok_or_else(|| Error::Usage("--group-by city, but the panel has no city column".into()));
    }
    let k = p
        .covariates()
        .index_of(key)
        .ok_or_else(|| Error::Usage(format!("--group-by `{key}` is neither `city` nor a covariate")))?;
    Ok((n0..p.n()).map(|i| p.covariates().values()[(i, k)].to_string()).collect())
}

fn bound(config: &Path) -> Result<Value> {
    let cfg = ConfigFile::load(config)?
        .bound
        .ok_or_else(|| Error::Usage(format!("`{}` has no [bound] section", config.display())))?;
    let fs = cfg.factors()?;
    let b = csc_error_bound(&fs, cfg.f, cfg.n0, cfg.t0, cfg.sigma, cfg.h)?;
    Ok(json!({
        "bound": b.bound,
        "probability": b.probability,
        "terms": b.terms,
        "second_term": b.second_term,
        "factors": fs,
        "inputs": cfg,
    }))
}
