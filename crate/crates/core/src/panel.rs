//! Panel outcome matrix, covariates and treatment layout.
//!
//! Rows are units with donors first and treated units last; columns are
//! periods in ascending order. All treated units adopt treatment at the same
//! period `t0 + 1`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Dummy,
    Continuous,
}

/// Time-invariant covariates, one row per unit (same order as the panel).
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    values: DMatrix<f64>,
    names: Vec<String>,
    kinds: Vec<CovariateKind>,
    groups: Vec<Option<String>>,
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

/// Stem used to pair dummy columns into a category group: `edu.hs` -> `edu`,
/// `cat3` -> `cat`, `region_north` -> `region`.
fn group_stem(name: &str) -> Option<&str> {
    if let Some((stem, _)) = name.split_once('.') {
        return Some(stem);
    }
    let trimmed = name.trim_end_matches(|c: char| c.is_ascii_digit());
    if !trimmed.is_empty() && trimmed.len() < name.len() {
        return Some(trimmed.trim_end_matches('_'));
    }
    name.rsplit_once('_').map(|(stem, _)| stem)
}

impl CovariateTable {
    pub fn empty(n: usize) -> Self {
        Self {
            values: DMatrix::zeros(n, 0),
            names: Vec::new(),
            kinds: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Builds a table, classifying each column as dummy (all 0/1) or continuous.
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if values.ncols() != names.len() {
            return Err(Error::Dimension(format!(
                "{} covariate columns but {} names",
                values.ncols(),
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate covariate `{name}`")));
            }
        }
        if !crate::linalg::all_finite(values.iter()) {
            return Err(Error::Numeric("covariate values".into()));
        }
        let kinds = (0..values.ncols())
            .map(|k| {
                if values.column(k).iter().all(|&v| is_binary(v)) {
                    CovariateKind::Dummy
                } else {
                    CovariateKind::Continuous
                }
            })
            .collect();
        let groups = vec![None; names.len()];
        Ok(Self {
            values,
            names,
            kinds,
            groups,
        })
    }

    /// Declares `members` a mutually exclusive category group.
    pub fn with_group(mut self, group: &str, members: &[&str]) -> Result<Self> {
        let idx = members
            .iter()
            .map(|m| {
                self.index_of(m)
                    .ok_or_else(|| Error::Config(format!("unknown covariate `{m}` in group `{group}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        for &k in &idx {
            if self.kinds[k] != CovariateKind::Dummy {
                return Err(Error::Config(format!(
                    "group `{group}` member `{}` is not a 0/1 dummy",
                    self.names[k]
                )));
            }
        }
        for i in 0..self.values.nrows() {
            let s: f64 = idx.iter().map(|&k| self.values[(i, k)]).sum();
            if s != 1.0 {
                return Err(Error::Config(format!(
                    "group `{group}` dummies do not sum to one in row {i}"
                )));
            }
        }
        for &k in &idx {
            self.groups[k] = Some(group.to_string());
        }
        Ok(self)
    }

    /// Groups dummy columns sharing a name stem whenever every row sums to one.
    pub fn infer_groups(mut self) -> Self {
        let mut by_stem: Vec<(String, Vec<usize>)> = Vec::new();
        for (k, name) in self.names.iter().enumerate() {
            if self.kinds[k] != CovariateKind::Dummy || self.groups[k].is_some() {
                continue;
            }
            if let Some(stem) = group_stem(name) {
                match by_stem.iter_mut().find(|(s, _)| s == stem) {
                    Some((_, v)) => v.push(k),
                    None => by_stem.push((stem.to_string(), vec![k])),
                }
            }
        }
        for (stem, idx) in by_stem {
            if idx.len() < 2 {
                continue;
            }
            let exclusive = (0..self.values.nrows())
                .all(|i| idx.iter().map(|&k| self.values[(i, k)]).sum::<f64>() == 1.0);
            if exclusive {
                for k in idx {
                    self.groups[k] = Some(stem.clone());
                }
            }
        }
        self
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[CovariateKind] {
        &self.kinds
    }

    pub fn groups(&self) -> &[Option<String>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sub-table with the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|m| self.index_of(m).ok_or_else(|| Error::Config(format!("unknown covariate `{m}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            values: self.values.select_columns(&idx),
            names: idx.iter().map(|&k| self.names[k].clone()).collect(),
            kinds: idx.iter().map(|&k| self.kinds[k]).collect(),
            groups: idx.iter().map(|&k| self.groups[k].clone()).collect(),
        })
    }

    /// Appends the columns of `other` (same row count).
    pub fn concat(&self, other: &CovariateTable) -> Result<Self> {
        let n = self.values.nrows();
        if other.values.nrows() != n {
            return Err(Error::Dimension("covariate tables differ in rows".into()));
        }
        let k = self.len() + other.len();
        let values = DMatrix::from_fn(n, k, |i, j| {
            if j < self.len() {
                self.values[(i, j)]
            } else {
                other.values[(i, j - self.len())]
            }
        });
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut out = Self::new(values, names)?;
        out.groups = self.groups.iter().chain(other.groups.iter()).cloned().collect();
        Ok(out)
    }

    fn permute_rows(&self, order: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(order),
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            groups: self.groups.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelMatrix {
    outcomes: DMatrix<f64>,
    unit_ids: Vec<String>,
    periods: Vec<i64>,
    n0: usize,
    t0: usize,
    covariates: CovariateTable,
    city_of: Option<Vec<String>>,
}

/// Read-only views of the four blocks of the outcome matrix.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a> {
    pub y_n0_pre: DMatrixView<'a, f64>,
    pub y_n0_post: DMatrixView<'a, f64>,
    pub y_n1_pre: DMatrixView<'a, f64>,
    pub y_n1_post: DMatrixView<'a, f64>,
}

impl BlockView<'_> {
    pub fn reassemble(&self) -> DMatrix<f64> {
        let (n0, t0) = self.y_n0_pre.shape();
        let n1 = self.y_n1_pre.nrows();
        let tp = self.y_n0_post.ncols();
        let mut out = DMatrix::zeros(n0 + n1, t0 + tp);
        out.view_mut((0, 0), (n0, t0)).copy_from(&self.y_n0_pre);
        out.view_mut((0, t0), (n0, tp)).copy_from(&self.y_n0_post);
        out.view_mut((n0, 0), (n1, t0)).copy_from(&self.y_n1_pre);
        out.view_mut((n0, t0), (n1, tp)).copy_from(&self.y_n1_post);
        out
    }
}

pub fn partition_blocks(p: &PanelMatrix) -> BlockView<'_> {
    let (n0, n1, t0, tp) = (p.n0, p.n1(), p.t0, p.t() - p.t0);
    BlockView {
        y_n0_pre: p.outcomes.view((0, 0), (n0, t0)),
        y_n0_post: p.outcomes.view((0, t0), (n0, tp)),
        y_n1_pre: p.outcomes.view((n0, 0), (n1, t0)),
        y_n1_post: p.outcomes.view((n0, t0), (n1, tp)),
    }
}

/// Training panel with `t0 = t_train` plus the held-out pre-period indices
/// (1-based).
///
/// The training panel keeps the pre-treatment columns only; the held-out
/// periods become its post block.
pub fn train_test_split(p: &PanelMatrix, t_train: usize) -> Result<(PanelMatrix, Vec<usize>)> {
    if t_train < 1 || t_train + 1 > p.t0 {
        return Err(Error::Split(format!(
            "t_train = {t_train} must lie in 1..={} for t0 = {}",
            p.t0.saturating_sub(1),
            p.t0
        )));
    }
    let train = PanelMatrix {
        outcomes: p.outcomes.columns(0, p.t0).into_owned(),
        unit_ids: p.unit_ids.clone(),
        periods: p.periods[..p.t0].to_vec(),
        n0: p.n0,
        t0: t_train,
        covariates: p.covariates.clone(),
        city_of: p.city_of.clone(),
    };
    Ok((train, (t_train + 1..=p.t0).collect()))
}

impl PanelMatrix {
    /// Builds a panel whose rows already follow the donors-then-treated layout.
    pub fn new(
        outcomes: DMatrix<f64>,
        unit_ids: Vec<String>,
        periods: Vec<i64>,
        n0: usize,
        t0: usize,
        covariates: CovariateTable,
        city_of: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, t) = outcomes.shape();
        if unit_ids.len() != n {
            return Err(Error::Dimension(format!("{n} rows but {} unit ids", unit_ids.len())));
        }
        if periods.len() != t {
            return Err(Error::Dimension(format!("{t} columns but {} periods", periods.len())));
        }
        if periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("periods must be strictly increasing".into()));
        }
        if n0 == 0 || n0 >= n {
            return Err(Error::Config(format!(
                "need at least one donor and one treated unit (n0 = {n0}, N = {n})"
            )));
        }
        if t0 == 0 || t0 >= t {
            return Err(Error::Config(format!("need 1 <= t0 < T (t0 = {t0}, T = {t})")));
        }
        if covariates.values.nrows() != n {
            return Err(Error::Dimension("covariate rows differ from units".into()));
        }
        if let Some(c) = &city_of {
            if c.len() != n {
                return Err(Error::Dimension("city labels differ from units".into()));
            }
        }
        if outcomes.iter().any(|v| v.is_nan()) {
            return Err(Error::MissingData("outcome matrix contains NaN".into()));
        }
        if !crate::linalg::all_finite(outcomes.iter()) {
            return Err(Error::Numeric("outcome matrix contains infinities".into()));
        }
        let mut seen = BTreeSet::new();
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Balance(format!("unit `{id}` appears twice")));
            }
        }
        Ok(Self {
            outcomes,
            unit_ids,
            periods,
            n0,
            t0,
            covariates,
            city_of,
        })
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn covariates(&self) -> &CovariateTable {
        &self.covariates
    }

    pub fn city_of(&self) -> Option<&[String]> {
        self.city_of.as_deref()
    }

    pub fn n(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn t(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn n1(&self) -> usize {
        self.n() - self.n0
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn post_len(&self) -> usize {
        self.t() - self.t0
    }

    pub fn is_treated_unit(&self, row: usize) -> bool {
        row >= self.n0
    }

    /// `D_it`: one for treated units in post periods.
    pub fn treatment(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.t(), |i, t| {
            if i >= self.n0 && t >= self.t0 {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn blocks(&self) -> BlockView<'_> {
        partition_blocks(self)
    }

    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        Self::new(
            outcomes,
            self.unit_ids.clone(),
            self.periods.clone(),
            self.n0,
            self.t0,
            self.covariates.clone(),
            self.city_of.clone(),
        )
    }

    pub fn with_covariates(&self, covariates: CovariateTable) -> Result<Self> {
        Self::new(
            self.outcomes.clone(),
            self.unit_ids.clone(),
            self.periods.clone(),
            self.n0,
            self.t0,
            covariates,
            self.city_of.clone(),
        )
    }

    pub fn with_cities(&self, city_of: Vec<String>) -> Result<Self> {
        Self::new(
            self.outcomes.clone(),
            self.unit_ids.clone(),
            self.periods.clone(),
            self.n0,
            self.t0,
            self.covariates.clone(),
            Some(city_of),
        )
    }

    /// Applies `log(1 + y)` to every outcome.
    pub fn log1p_outcomes(&self) -> Result<Self> {
        if self.outcomes.iter().any(|&v| v <= -1.0) {
            return Err(Error::Numeric("log(1 + y) needs outcomes above -1".into()));
        }
        self.with_outcomes(self.outcomes.map(f64::ln_1p))
    }

    /// Long-format records in matrix order (units by row, periods ascending).
    pub fn to_records(&self) -> Vec<PanelRecord> {
        let mut out = Vec::with_capacity(self.n() * self.t());
        for i in 0..self.n() {
            for t in 0..self.t() {
                out.push(PanelRecord {
                    unit_id: self.unit_ids[i].clone(),
                    time: self.periods[t],
                    outcome: Some(self.outcomes[(i, t)]),
                    treated: Some(i >= self.n0 && t >= self.t0),
                    city: self.city_of.as_ref().map(|c| c[i].clone()),
                    covariates: self.covariates.values.row(i).iter().map(|&v| Some(v)).collect(),
                });
            }
        }
        out
    }

    /// Validates long-format records and arranges them in the panel layout.
    pub fn from_records(records: &[PanelRecord], opts: &RecordOptions) -> Result<Self> {
        let k = opts.covariate_names.len();
        let mut order: Vec<String> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut periods = BTreeSet::new();
        for r in records {
            if r.covariates.len() != k {
                return Err(Error::Dimension(format!(
                    "record for `{}` has {} covariates, expected {k}",
                    r.unit_id,
                    r.covariates.len()
                )));
            }
            if !index.contains_key(r.unit_id.as_str()) {
                index.insert(r.unit_id.as_str(), order.len());
                order.push(r.unit_id.clone());
            }
            periods.insert(r.time);
        }
        if order.is_empty() {
            return Err(Error::MissingData("no records".into()));
        }
        let periods: Vec<i64> = periods.into_iter().collect();
        let col: HashMap<i64, usize> = periods.iter().enumerate().map(|(j, &p)| (p, j)).collect();
        let (n, t) = (order.len(), periods.len());

        let mut cells: Vec<Option<&PanelRecord>> = vec![None; n * t];
        for r in records {
            let slot = index[r.unit_id.as_str()] * t + col[&r.time];
            if cells[slot].is_some() {
                return Err(Error::Balance(format!(
                    "unit `{}` has more than one row for period {}",
                    r.unit_id, r.time
                )));
            }
            cells[slot] = Some(r);
        }
        for (i, id) in order.iter().enumerate() {
            if let Some(j) = (0..t).find(|&j| cells[i * t + j].is_none()) {
                return Err(Error::Balance(format!("unit `{id}` has no row for period {}", periods[j])));
            }
        }
        let cell = |i: usize, j: usize| cells[i * t + j].expect("balance checked");

        let mut outcomes = DMatrix::zeros(n, t);
        let mut cov = DMatrix::zeros(n, k);
        let mut cities: Vec<Option<String>> = vec![None; n];
        for i in 0..n {
            for j in 0..t {
                let r = cell(i, j);
                outcomes[(i, j)] = match r.outcome {
                    Some(v) if !v.is_nan() => v,
                    _ => {
                        return Err(Error::MissingData(format!(
                            "outcome of `{}` in period {}",
                            order[i], periods[j]
                        )))
                    }
                };
                for c in 0..k {
                    let v = r.covariates[c].filter(|v| !v.is_nan()).ok_or_else(|| {
                        Error::MissingData(format!(
                            "covariate `{}` of `{}` in period {}",
                            opts.covariate_names[c], order[i], periods[j]
                        ))
                    })?;
                    if j == 0 {
                        cov[(i, c)] = v;
                    } else if cov[(i, c)] != v {
                        return Err(Error::Config(format!(
                            "covariate `{}` varies over time for unit `{}`",
                            opts.covariate_names[c], order[i]
                        )));
                    }
                }
                if j == 0 {
                    cities[i] = r.city.clone();
                } else if cities[i] != r.city {
                    return Err(Error::Config(format!("city of unit `{}` changes over time", order[i])));
                }
            }
        }

        // Adoption period per unit, as a column index.
        let mut first_treated: Vec<Option<usize>> = vec![None; n];
        match &opts.treatment_override {
            Some(ov) => {
                let start = col.get(&ov.first_treated_period).copied().ok_or_else(|| {
                    Error::Config(format!("period {} not in panel", ov.first_treated_period))
                })?;
                for u in &ov.treated_units {
                    let i = *index
                        .get(u.as_str())
                        .ok_or_else(|| Error::Config(format!("treated unit `{u}` not in panel")))?;
                    first_treated[i] = Some(start);
                }
            }
            None => {
                for i in 0..n {
                    let mut started = None;
                    for j in 0..t {
                        let d = cell(i, j).treated.ok_or_else(|| {
                            Error::MissingData(format!("treated flag of `{}` in period {}", order[i], periods[j]))
                        })?;
                        match (d, started) {
                            (true, None) => started = Some(j),
                            (false, Some(_)) => {
                                return Err(Error::StaggeredAdoption(format!(
                                    "unit `{}` leaves treatment in period {}",
                                    order[i], periods[j]
                                )))
                            }
                            _ => {}
                        }
                    }
                    first_treated[i] = started;
                }
            }
        }
        let starts: BTreeSet<usize> = first_treated.iter().flatten().copied().collect();
        if starts.len() > 1 {
            return Err(Error::StaggeredAdoption(format!(
                "treated units adopt in {} different periods",
                starts.len()
            )));
        }
        let t0 = *starts
            .iter()
            .next()
            .ok_or_else(|| Error::Config("no treated unit in panel".into()))?;
        if t0 == 0 {
            return Err(Error::Config("treatment starts in the first period".into()));
        }

        let mut rows: Vec<usize> = (0..n).filter(|&i| first_treated[i].is_none()).collect();
        let n0 = rows.len();
        rows.extend((0..n).filter(|&i| first_treated[i].is_some()));

        let city_of = if cities.iter().all(Option::is_some) {
            Some(rows.iter().map(|&i| cities[i].clone().unwrap()).collect())
        } else if cities.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::MissingData("city label missing for some units".into()));
        };
        let covariates = CovariateTable::new(cov, opts.covariate_names.clone())?.permute_rows(&rows);
        let covariates = opts
            .groups
            .iter()
            .try_fold(covariates, |acc, (g, members)| {
                let m: Vec<&str> = members.iter().map(String::as_str).collect();
                acc.with_group(g, &m)
            })?
            .infer_groups();
        Self::new(
            outcomes.select_rows(&rows),
            rows.iter().map(|&i| order[i].clone()).collect(),
            periods,
            n0,
            t0,
            covariates,
            city_of,
        )
    }
}

/// One unit-period row of a long-format panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub unit_id: String,
    pub time: i64,
    pub outcome: Option<f64>,
    pub treated: Option<bool>,
    pub city: Option<String>,
    /// Aligned with [`RecordOptions::covariate_names`].
    pub covariates: Vec<Option<f64>>,
}

/// Treated units and adoption period for files without a treatment column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentOverride {
    pub treated_units: Vec<String>,
    pub first_treated_period: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordOptions {
    pub covariate_names: Vec<String>,
    /// Explicit category groups (name, members).
    pub groups: Vec<(String, Vec<String>)>,
    pub treatment_override: Option<TreatmentOverride>,
}
