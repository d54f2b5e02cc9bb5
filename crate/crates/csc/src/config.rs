//! TOML run configuration.
//!
//! ```toml
//! scenarios = "benchmark"      # or "custom" (default): use [[simulation.scenario_overrides]]
//!
//! [simulation]
//! reps = 200
//!
//! [simulation.dgp]
//! n = 100
//! seed = 0
//!
//! [bound]
//! f = 1
//! n0 = 4
//! t0 = 2
//! sigma = 1.0
//! h = 1.0
//! ```

use std::path::Path;

use csc_core::harness::{benchmark_scenarios, SimulationSpec};
use csc_core::theory::FactorSummary;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioPreset {
    #[default]
    Custom,
    Benchmark,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scenarios: ScenarioPreset,
    pub simulation: SimulationSpec,
    pub bound: Option<BoundConfig>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        toml::from_str(&text).map_err(|source| Error::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    /// The simulation spec with the scenario preset applied.
    pub fn simulation_spec(&self) -> SimulationSpec {
        let mut spec = self.simulation.clone();
        if self.scenarios == ScenarioPreset::Benchmark {
            spec.scenario_overrides = benchmark_scenarios();
        }
        spec
    }
}

/// Inputs of the CSC error bound. Without explicit factors every factor is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub f: usize,
    pub n0: usize,
    pub t0: usize,
    pub sigma: f64,
    pub h: f64,
    /// `t0` rows of `f` pre-treatment factor values.
    #[serde(default)]
    pub lambda_pre: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub lambda_post: Option<Vec<f64>>,
}

impl BoundConfig {
    pub fn factors(&self) -> Result<FactorSummary> {
        let pre = match &self.lambda_pre {
            None => DMatrix::from_element(self.t0, self.f, 1.0),
            Some(rows) => {
                if rows.len() != self.t0 || rows.iter().any(|r| r.len() != self.f) {
                    return Err(Error::Usage(format!(
                        "lambda_pre must have t0 = {} rows of f = {} values",
                        self.t0, self.f
                    )));
                }
                DMatrix::from_fn(self.t0, self.f, |i, j| rows[i][j])
            }
        };
        let post = match &self.lambda_post {
            None => DVector::from_element(self.f, 1.0),
            Some(v) if v.len() == self.f => DVector::from_column_slice(v),
            Some(v) => {
                return Err(Error::Usage(format!(
                    "lambda_post has {} values, expected f = {}",
                    v.len(),
                    self.f
                )))
            }
        };
        Ok(FactorSummary::new(pre, post)?)
    }
}
