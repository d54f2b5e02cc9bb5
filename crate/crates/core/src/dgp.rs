//! Interactive fixed-effects panel generator and an exact-fit generator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CovariateTable, PanelMatrix};

pub const BETA: [f64; 6] = [1.0, 0.4, 0.6, 0.8, 1.0, 1.2];

/// Common factors, periods x factors.
pub const LAMBDA: [[f64; 4]; 8] = [
    [1.79, 2.44, 2.49, 2.31],
    [3.27, 2.11, 2.09, 1.55],
    [4.08, 2.52, 2.16, 3.58],
    [0.65, 2.00, 5.41, 1.98],
    [3.43, 2.22, 3.13, 2.99],
    [3.51, 3.06, 2.51, 2.06],
    [2.43, 3.96, 2.56, 4.10],
    [2.45, 2.89, 3.46, 2.52],
];

/// Covariate to loading link, covariate terms x factors.
pub const GAMMA: [[f64; 4]; 6] = [
    [-1.48, -0.32, -0.78, 0.51],
    [1.58, -0.63, 0.01, -0.29],
    [-0.96, -0.11, -0.15, 0.22],
    [-0.92, 0.43, -0.70, 2.01],
    [-2.00, -0.78, 1.19, 1.01],
    [-0.27, -1.29, 0.34, -0.30],
];

pub const PHI: [f64; 4] = [-1.12, -0.46, 3.12, 0.14];

/// Standard normal quintile cut points.
const NORMAL_QUINTILES: [f64; 4] = [-0.841_621_233_572_914_3, -0.253_347_103_135_799_7, 0.253_347_103_135_799_7, 0.841_621_233_572_914_3];

const PILOT_UNITS: usize = 200_000;
const PILOT_SEED: u64 = 0x5eed_ca1b;

/// How the covariate vector entering `beta` and `gamma` is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLayout {
    /// `(x1, q1(x2), ..., q5(x2))`: the category index enters linearly,
    /// the continuous predictor through quintile dummies.
    #[default]
    CategoryIndex,
    /// `(x2, 1[x1 = 1], ..., 1[x1 = K])`.
    CategoryDummies,
}

/// Which loadings enter the treatment logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOn {
    /// `mu_i = gamma x_i + v_i`.
    #[default]
    Loadings,
    /// `v_i` only, so selection is independent of the covariates.
    LoadingShocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpParams {
    pub n: usize,
    pub t: usize,
    pub f: usize,
    /// Categories of the discrete predictor.
    pub k_cat: usize,
    pub tau: f64,
    pub sigma: f64,
    pub beta: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    /// Multiplies `phi`; 0 gives random assignment.
    pub phi_scale: f64,
    pub e_pi: f64,
    /// Mean of the loading shock; empty means zero.
    pub mu_mean: Vec<f64>,
    /// Treatment logit intercept; calibrated to `e_pi` when absent.
    pub treatment_intercept: Option<f64>,
    pub layout: CovariateLayout,
    pub selection_on: SelectionOn,
    pub seed: u64,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            n: 100,
            t: 6,
            f: 3,
            k_cat: 5,
            tau: 1.0,
            sigma: 1.0,
            beta: BETA.to_vec(),
            lambda: LAMBDA.iter().map(|r| r.to_vec()).collect(),
            gamma: GAMMA.iter().map(|r| r.to_vec()).collect(),
            phi: PHI.to_vec(),
            phi_scale: 1.0,
            e_pi: 0.15,
            mu_mean: Vec::new(),
            treatment_intercept: None,
            layout: CovariateLayout::default(),
            selection_on: SelectionOn::default(),
            seed: 0,
        }
    }
}

impl DgpParams {
    pub fn t0(&self) -> usize {
        self.t - 1
    }

    /// `phi` truncated to `f` factors and scaled.
    pub fn effective_phi(&self) -> DVector<f64> {
        DVector::from_iterator(self.f, self.phi.iter().take(self.f).map(|p| p * self.phi_scale))
    }

    pub fn is_random_assignment(&self) -> bool {
        self.effective_phi().iter().all(|&p| p == 0.0)
    }

    fn mu_shift(&self) -> DVector<f64> {
        if self.mu_mean.is_empty() {
            DVector::zeros(self.f)
        } else {
            DVector::from_column_slice(&self.mu_mean[..self.f])
        }
    }

    /// Length of the covariate vector multiplying `beta` and `gamma`.
    fn design_len(&self) -> usize {
        match self.layout {
            CovariateLayout::CategoryIndex => 1 + NORMAL_QUINTILES.len() + 1,
            CovariateLayout::CategoryDummies => 1 + self.k_cat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n < 3 {
            return cfg(format!("need at least 3 units, got {}", self.n));
        }
        if self.t < 2 {
            return cfg(format!("need at least 2 periods, got {}", self.t));
        }
        if self.f == 0 {
            return cfg("need at least one factor".into());
        }
        if self.k_cat == 0 {
            return cfg("k_cat must be positive".into());
        }
        if self.lambda.len() < self.t || self.lambda.iter().any(|r| r.len() < self.f) {
            return cfg(format!("stored factors do not cover T={} and F={}", self.t, self.f));
        }
        let k = self.design_len();
        if self.beta.len() != k {
            return cfg(format!("beta has {} entries, covariate layout needs {k}", self.beta.len()));
        }
        if self.gamma.len() != k || self.gamma.iter().any(|r| r.len() < self.f) {
            return cfg(format!("gamma must be {k} x {} or wider", self.f));
        }
        if self.phi.len() < self.f {
            return cfg(format!("phi has {} entries for F={}", self.phi.len(), self.f));
        }
        if !self.mu_mean.is_empty() && self.mu_mean.len() < self.f {
            return cfg(format!("mu_mean has {} entries for F={}", self.mu_mean.len(), self.f));
        }
        if !(self.e_pi > 0.0 && self.e_pi < 1.0) {
            return cfg(format!("e_pi must lie in (0, 1), got {}", self.e_pi));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 || !self.tau.is_finite() || !self.phi_scale.is_finite() {
            return cfg("sigma, tau and phi_scale must be finite with sigma >= 0".into());
        }
        Ok(())
    }

    pub(crate) fn lambda_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, self.f, |t, f| self.lambda[t][f])
    }

    fn gamma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.gamma.len(), self.f, |k, f| self.gamma[k][f])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: PanelMatrix,
    pub true_tau: f64,
    /// Untreated potential outcomes of the treated units in the post periods.
    pub oracle_y0: DMatrix<f64>,
    /// `mu~_i . lambda~_t`, loadings and factors demeaned over units and periods.
    pub oracle_demeaned_ife: DMatrix<f64>,
    /// Realised loadings, N x F, panel row order.
    pub mu: DMatrix<f64>,
    /// Idiosyncratic shocks, N x T, panel row order.
    pub errors: DMatrix<f64>,
    /// Factors used, T x F.
    pub lambda: DMatrix<f64>,
    /// Known exact-fit weights (n0 x n1) for constructed instances.
    pub w_star: Option<DMatrix<f64>>,
    pub treatment_intercept: Option<f64>,
}

/// Quintile of a standard normal draw, 0..=4.
fn quintile(x: f64) -> usize {
    NORMAL_QUINTILES.iter().filter(|&&c| x > c).count()
}

fn design_row(layout: CovariateLayout, k_cat: usize, x1: usize, x2: f64) -> Vec<f64> {
    match layout {
        CovariateLayout::CategoryIndex => {
            let mut r = vec![x1 as f64];
            r.extend((0..5).map(|q| f64::from(quintile(x2) == q)));
            r
        }
        CovariateLayout::CategoryDummies => {
            let mut r = vec![x2];
            r.extend((1..=k_cat).map(|c| f64::from(c == x1)));
            r
        }
    }
}

struct Units {
    x1: Vec<usize>,
    x2: Vec<f64>,
    mu: DMatrix<f64>,
    /// Loading shocks `v_i`.
    v: DMatrix<f64>,
}

impl Units {
    /// Loadings that drive treatment selection.
    fn selection(&self, params: &DgpParams) -> &DMatrix<f64> {
        match params.selection_on {
            SelectionOn::Loadings => &self.mu,
            SelectionOn::LoadingShocks => &self.v,
        }
    }
}

/// Draws covariates, loadings and loading shocks for `n` units.
fn draw_units(params: &DgpParams, n: usize, rng: &mut impl Rng) -> Units {
    let x1: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=params.k_cat)).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let gamma = params.gamma_matrix();
    let shift = params.mu_shift();
    let mut mu = DMatrix::zeros(n, params.f);
    let mut shocks = DMatrix::zeros(n, params.f);
    for i in 0..n {
        let x = DVector::from_vec(design_row(params.layout, params.k_cat, x1[i], x2[i]));
        let base = gamma.tr_mul(&x);
        for f in 0..params.f {
            let v: f64 = rng.sample(StandardNormal);
            shocks[(i, f)] = shift[f] + v;
            mu[(i, f)] = base[f] + shift[f] + v;
        }
    }
    Units { x1, x2, mu, v: shocks }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intercept `c` such that the mean of `logistic(mu . phi + c + e)` over a
/// fixed pilot sample equals `params.e_pi`.
pub fn calibrate_intercept(params: &DgpParams) -> Result<f64> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(PILOT_SEED);
    let units = draw_units(params, PILOT_UNITS, &mut rng);
    let mu = units.selection(params);
    let phi = params.effective_phi();
    let index: Vec<f64> = (0..PILOT_UNITS)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            mu.row(i).transpose().dot(&phi) + e
        })
        .collect();
    let mean_pi = |c: f64| index.iter().map(|z| logistic(z + c)).sum::<f64>() / index.len() as f64;
    let target = params.e_pi;
    let (mut lo, mut hi) = (-10.0, 10.0);
    let mut expansions = 0;
    while mean_pi(lo) > target || mean_pi(hi) < target {
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
        if expansions > 20 {
            return Err(Error::Calibration(format!(
                "no intercept in [{lo}, {hi}] reaches mean treatment probability {target}"
            )));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_pi(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn draw_treatment(index: f64, rng: &mut impl Rng) -> bool {
    let e: f64 = rng.sample(StandardNormal);
    rng.gen::<f64>() < logistic(index + e)
}

/// Bernoulli treatment with `pi_i = logistic(mu_i . phi + c + e_i)`, redrawn
/// until at least one unit is treated and at least two are not.
pub fn assign_treatment(
    mu: &DMatrix<f64>,
    phi: &DVector<f64>,
    intercept: f64,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    if mu.ncols() != phi.len() {
        return Err(Error::Dimension(format!(
            "loadings have {} factors, phi has {}",
            mu.ncols(),
            phi.len()
        )));
    }
    let n = mu.nrows();
    if n < 3 {
        return Err(Error::Config("treatment assignment needs at least 3 units".into()));
    }
    let index = mu * phi;
    for _ in 0..10_000 {
        let d: Vec<bool> = (0..n).map(|i| draw_treatment(index[i] + intercept, rng)).collect();
        let n1 = d.iter().filter(|&&b| b).count();
        if n1 >= 1 && n1 + 2 <= n {
            return Ok(d);
        }
    }
    Err(Error::Calibration("treatment draw never produced both groups".into()))
}

fn demeaned_ife(mu: &DMatrix<f64>, lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let mu_bar = mu.row_mean();
    let lambda_bar = lambda.row_mean();
    let mut mu_t = mu.clone();
    for mut row in mu_t.row_iter_mut() {
        row -= &mu_bar;
    }
    let mut lambda_t = lambda.clone();
    for mut row in lambda_t.row_iter_mut() {
        row -= &lambda_bar;
    }
    mu_t * lambda_t.transpose()
}

/// Stable permutation putting untreated units first.
fn donors_first(treated: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..treated.len()).filter(|&i| !treated[i]).collect();
    order.extend((0..treated.len()).filter(|&i| treated[i]));
    order
}

/// Covariate columns exported with a generated panel.
pub fn covariate_names(k_cat: usize) -> Vec<String> {
    let mut names = vec!["x1".to_string(), "x2".to_string()];
    names.extend((1..=k_cat).map(|c| format!("x1_{c}")));
    names.extend((1..=5).map(|q| format!("x2_q{q}")));
    names
}

/// Dummy columns (category indicators and quintiles) fit for CSC.
pub fn dummy_covariate_names(k_cat: usize) -> Vec<String> {
    covariate_names(k_cat).into_iter().skip(2).collect()
}

/// One panel from the interactive fixed-effects model
/// `y_it = beta . x_i + lambda_t . mu_i + D_it tau + e_it`.
pub fn generate_panel(params: &DgpParams) -> Result<SimulatedPanel> {
    params.validate()?;
    let intercept = match params.treatment_intercept {
        Some(c) => c,
        None => calibrate_intercept(params)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let units = draw_units(params, params.n, &mut rng);
    let treated = assign_treatment(units.selection(params), &params.effective_phi(), intercept, &mut rng)?;
    assemble(params, units, &treated, intercept, &mut rng)
}

/// Like [`generate_panel`] but with exactly `n0` donors and `n1` treated
/// units: units are drawn and assigned one at a time and kept while their
/// group still has room, so each group is an i.i.d. sample from its
/// conditional distribution. `params.n` is ignored.
pub fn generate_panel_with_groups(params: &DgpParams, n0: usize, n1: usize) -> Result<SimulatedPanel> {
    if n0 < 2 || n1 == 0 {
        return Err(Error::Config(format!("need n0 >= 2 and n1 >= 1, got {n0} and {n1}")));
    }
    let params = DgpParams {
        n: n0 + n1,
        ..params.clone()
    };
    params.validate()?;
    let intercept = match params.treatment_intercept {
        Some(c) => c,
        None => calibrate_intercept(&params)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let phi = params.effective_phi();
    let (mut x1, mut x2) = (Vec::new(), Vec::new());
    let mut mu = DMatrix::zeros(n0 + n1, params.f);
    let mut treated = Vec::new();
    let (mut have0, mut have1) = (0, 0);
    let mut drawn = 0usize;
    while have0 < n0 || have1 < n1 {
        drawn += 1;
        if drawn > 1000 * (n0 + n1) + 100_000 {
            return Err(Error::Calibration(format!(
                "{drawn} draws did not fill {n0} donors and {n1} treated units"
            )));
        }
        let u = draw_units(&params, 1, &mut rng);
        let d = draw_treatment(u.selection(&params).row(0).transpose().dot(&phi) + intercept, &mut rng);
        if (d && have1 == n1) || (!d && have0 == n0) {
            continue;
        }
        if d {
            have1 += 1;
        } else {
            have0 += 1;
        }
        mu.set_row(treated.len(), &u.mu.row(0));
        x1.push(u.x1[0]);
        x2.push(u.x2[0]);
        treated.push(d);
    }
    let units = Units {
        x1,
        x2,
        v: DMatrix::zeros(0, params.f),
        mu,
    };
    assemble(&params, units, &treated, intercept, &mut rng)
}

fn assemble(
    params: &DgpParams,
    units: Units,
    treated: &[bool],
    intercept: f64,
    rng: &mut impl Rng,
) -> Result<SimulatedPanel> {
    let (n, t, t0) = (treated.len(), params.t, params.t0());
    let Units { x1, x2, mu: mu_raw, .. } = units;
    let noise = Normal::new(0.0, params.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let eps_raw = DMatrix::from_fn(n, t, |_, _| noise.sample(rng));

    let order = donors_first(treated);
    let n1 = treated.iter().filter(|&&b| b).count();
    let n0 = n - n1;
    let lambda = params.lambda_matrix();
    let beta = DVector::from_column_slice(&params.beta);

    let names = covariate_names(params.k_cat);
    let mut cov = DMatrix::zeros(n, names.len());
    let mut mu = DMatrix::zeros(n, params.f);
    let mut errors = DMatrix::zeros(n, t);
    let mut y0 = DMatrix::zeros(n, t);
    for (r, &i) in order.iter().enumerate() {
        let x = DVector::from_vec(design_row(params.layout, params.k_cat, x1[i], x2[i]));
        let level = beta.dot(&x);
        mu.set_row(r, &mu_raw.row(i));
        errors.set_row(r, &eps_raw.row(i));
        for tt in 0..t {
            y0[(r, tt)] = level + lambda.row(tt).dot(&mu_raw.row(i)) + eps_raw[(i, tt)];
        }
        cov[(r, 0)] = x1[i] as f64;
        cov[(r, 1)] = x2[i];
        cov[(r, 1 + x1[i])] = 1.0;
        cov[(r, 2 + params.k_cat + quintile(x2[i]))] = 1.0;
    }
    let mut y = y0.clone();
    for r in n0..n {
        for tt in t0..t {
            y[(r, tt)] += params.tau;
        }
    }
    let x1_names: Vec<String> = (1..=params.k_cat).map(|c| format!("x1_{c}")).collect();
    let q_names: Vec<String> = (1..=5).map(|q| format!("x2_q{q}")).collect();
    let table = CovariateTable::new(cov, names)?
        .with_group("x1", &x1_names.iter().map(String::as_str).collect::<Vec<_>>())?
        .with_group("x2_q", &q_names.iter().map(String::as_str).collect::<Vec<_>>())?;
    let unit_ids = order.iter().map(|i| format!("unit{:04}", i + 1)).collect();
    let panel = PanelMatrix::new(y, unit_ids, (1..=t as i64).collect(), n0, t0, table, None)?;
    Ok(SimulatedPanel {
        oracle_y0: y0.view((n0, t0), (n1, t - t0)).into_owned(),
        oracle_demeaned_ife: demeaned_ife(&mu, &lambda),
        panel,
        true_tau: params.tau,
        mu,
        errors,
        lambda,
        w_star: None,
        treatment_intercept: Some(intercept),
    })
}

/// Parameters of the exact-fit construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactFitParams {
    pub n0: usize,
    pub n1: usize,
    pub t0: usize,
    pub f: usize,
    pub sigma: f64,
    pub tau: f64,
    /// Scale of the treated loading offsets `delta_i` absorbed by the
    /// pre-period errors; 0 keeps loadings exact convex combinations.
    pub loading_shift: f64,
}

/// Condition number above which `lambda_pre' lambda_pre` counts as singular.
pub const COND_LIMIT: f64 = 1e12;

pub(crate) fn gram_condition(lambda_pre: &DMatrix<f64>) -> f64 {
    let g = lambda_pre.tr_mul(lambda_pre);
    let (vals, _) = crate::linalg::sym_eigen(&g);
    let (lo, hi) = (vals[0], vals[vals.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Panel whose treated pre-period outcomes and covariates are exact convex
/// combinations of the donors with known weights `w_star`.
pub fn generate_exact_fit_panel(
    n0: usize,
    n1: usize,
    t0: usize,
    f: usize,
    sigma: f64,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<SimulatedPanel> {
    let params = ExactFitParams {
        n0,
        n1,
        t0,
        f,
        sigma,
        tau,
        loading_shift: 0.0,
    };
    generate_exact_fit_panel_with(&params, rng)
}

pub fn generate_exact_fit_panel_with(params: &ExactFitParams, rng: &mut impl Rng) -> Result<SimulatedPanel> {
    let ExactFitParams {
        n0,
        n1,
        t0,
        f,
        sigma,
        tau,
        loading_shift,
    } = *params;
    if t0 <= f || n0 < 2 || n1 == 0 || f == 0 {
        return Err(Error::Config(format!(
            "exact fit needs t0 > F >= 1, n0 >= 2 and n1 >= 1 (got t0={t0}, F={f}, n0={n0}, n1={n1})"
        )));
    }
    if !(sigma >= 0.0 && loading_shift >= 0.0) {
        return Err(Error::Config("sigma and loading_shift must be non-negative".into()));
    }
    let t = t0 + 1;
    let n = n0 + n1;
    let factor = Normal::new(3.0, 2f64.sqrt()).expect("valid");
    let mut lambda = None;
    for _ in 0..100 {
        let cand = DMatrix::from_fn(t, f, |_, _| factor.sample(rng));
        if gram_condition(&cand.rows(0, t0).into_owned()) < COND_LIMIT {
            lambda = Some(cand);
            break;
        }
    }
    let lambda = lambda.ok_or_else(|| {
        Error::DegenerateFactor("pre-period factor Gram matrix singular after 100 draws".into())
    })?;
    let lambda_pre = lambda.rows(0, t0).into_owned();

    let mut mu = DMatrix::zeros(n, f);
    let mut errors = DMatrix::zeros(n, t);
    let mut x = DMatrix::zeros(n, 1);
    for j in 0..n0 {
        for k in 0..f {
            mu[(j, k)] = 1.0 + rng.sample::<f64, _>(StandardNormal);
        }
        for tt in 0..t {
            errors[(j, tt)] = sigma * rng.sample::<f64, _>(StandardNormal);
        }
        x[(j, 0)] = rng.sample(StandardNormal);
    }
    let mut w_star = DMatrix::zeros(n0, n1);
    for i in 0..n1 {
        let draws: Vec<f64> = (0..n0).map(|_| rng.sample(Exp1)).collect();
        let s: f64 = draws.iter().sum();
        for j in 0..n0 {
            w_star[(j, i)] = draws[j] / s;
        }
        let w = w_star.column(i);
        let r = n0 + i;
        let delta = DVector::from_fn(f, |_, _| loading_shift * rng.sample::<f64, _>(StandardNormal));
        for k in 0..f {
            mu[(r, k)] = (0..n0).map(|j| w[j] * mu[(j, k)]).sum::<f64>() + delta[k];
        }
        let absorbed = &lambda_pre * &delta;
        for tt in 0..t0 {
            errors[(r, tt)] = (0..n0).map(|j| w[j] * errors[(j, tt)]).sum::<f64>() - absorbed[tt];
        }
        errors[(r, t0)] = sigma * rng.sample::<f64, _>(StandardNormal);
        x[(r, 0)] = (0..n0).map(|j| w[j] * x[(j, 0)]).sum();
    }
    // Treated pre-period outcomes are assembled from donor outcomes so the
    // fit is exact in floating point, not just algebraically.
    let mut y0 = &mu * lambda.transpose() + &errors;
    for i in 0..n1 {
        for tt in 0..t0 {
            y0[(n0 + i, tt)] = (0..n0).map(|j| w_star[(j, i)] * y0[(j, tt)]).sum();
        }
    }
    let mut y = y0.clone();
    for r in n0..n {
        y[(r, t0)] += tau;
    }
    let ids = (0..n)
        .map(|i| if i < n0 { format!("donor{i}") } else { format!("treated{}", i - n0) })
        .collect();
    let panel = PanelMatrix::new(
        y,
        ids,
        (1..=t as i64).collect(),
        n0,
        t0,
        CovariateTable::new(x, vec!["x".into()])?,
        None,
    )?;
    Ok(SimulatedPanel {
        oracle_y0: y0.view((n0, t0), (n1, 1)).into_owned(),
        oracle_demeaned_ife: demeaned_ife(&mu, &lambda),
        panel,
        true_tau: tau,
        mu,
        errors,
        lambda,
        w_star: Some(w_star),
        treatment_intercept: None,
    })
}
