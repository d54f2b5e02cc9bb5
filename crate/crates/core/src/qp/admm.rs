//! Operator splitting for `min ||A x - b||^2  s.t.  E x = f,  G x >= 0`.
//!
//! Equalities are eliminated through a null-space parametrization; the
//! remaining inequality-constrained problem is solved by ADMM on
//! `min 1/2 z'Pz + q'z  s.t.  C z >= l` (OSQP-style splitting with
//! over-relaxation and adaptive penalty). Every few dozen iterations the
//! ADMM iterate's active set is used to polish an exact solution, which is
//! accepted once its KKT conditions certify.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{ConstrainedLsProblem, SolverOptions, SolverReport, SolverStatus};
use crate::error::Result;
use crate::linalg::{affine_parametrization, lstsq};

const SIGMA: f64 = 1e-6;
const RELAX: f64 = 1.6;
const POLISH_EVERY: usize = 25;
const POLISH_ROUNDS: usize = 16;

pub fn solve_constrained_ls(
    prob: &ConstrainedLsProblem,
    opts: &SolverOptions,
) -> Result<SolverReport> {
    prob.validate()?;
    let p = prob.dim();

    // Unit-norm columns; x = d .* xi.
    let d = DVector::from_fn(p, |j, _| {
        let nrm = prob.design.column(j).norm();
        if nrm > 0.0 {
            1.0 / nrm
        } else {
            1.0
        }
    });
    let scale_cols = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for j in 0..p {
            out.column_mut(j).scale_mut(d[j]);
        }
        out
    };
    let a_s = scale_cols(&prob.design);
    let e_s = scale_cols(&prob.eq_lhs);
    let g_s = scale_cols(&prob.nonneg_lhs);

    let unscale = |xi: &DVector<f64>| xi.component_mul(&d);

    let Some((xi0, null)) = affine_parametrization(&e_s, &prob.eq_rhs, opts.feas_tol) else {
        let x = unscale(&lstsq(&e_s, &prob.eq_rhs));
        return Ok(report(prob, x, 0, SolverStatus::Infeasible, Vec::new(), opts));
    };

    let a_hat = &a_s * &null;
    let b_hat = &prob.target - &a_s * &xi0;
    let mut c_rows = Vec::new();
    let mut lower = Vec::new();
    let g_null = &g_s * &null;
    let g_off = &g_s * &xi0;
    for i in 0..g_s.nrows() {
        let row = g_null.row(i);
        let nrm = row.norm();
        if nrm <= 1e-12 * (1.0 + g_s.row(i).norm()) {
            if g_off[i] < -opts.feas_tol {
                let x = unscale(&xi0);
                return Ok(report(prob, x, 0, SolverStatus::Infeasible, Vec::new(), opts));
            }
            continue;
        }
        c_rows.push(row / nrm);
        lower.push(-g_off[i] / nrm);
    }
    let k = null.ncols();
    let lift = |z: &DVector<f64>| unscale(&(&xi0 + &null * z));

    if k == 0 {
        let x = lift(&DVector::zeros(0));
        let obj = prob.objective(&x);
        let feasible = lower.iter().all(|&l| l <= opts.feas_tol);
        let status = if feasible { SolverStatus::Converged } else { SolverStatus::Infeasible };
        return Ok(report(prob, x, 0, status, vec![obj], opts));
    }
    if c_rows.is_empty() {
        let z = lstsq(&a_hat, &b_hat);
        let x = lift(&z);
        let obj = prob.objective(&x);
        return Ok(report(prob, x, 1, SolverStatus::Converged, vec![obj], opts));
    }

    let c = DMatrix::from_rows(&c_rows);
    let l = DVector::from_vec(lower);
    let reduced = Reduced {
        a: a_hat,
        b: b_hat,
        c,
        l,
    };
    let (z, iterations, status, trace) = reduced.solve(opts);
    let x = lift(&z);
    Ok(report(prob, x, iterations, status, trace, opts))
}

fn report(
    prob: &ConstrainedLsProblem,
    x: DVector<f64>,
    iterations: usize,
    status: SolverStatus,
    objective_trace: Vec<f64>,
    opts: &SolverOptions,
) -> SolverReport {
    let act_tol = 1e-9 * (1.0 + x.amax());
    let kkt = prob.kkt_residual(&x, act_tol);
    let primal = prob.equality_residual(&x);
    let viol = prob.violation(&x);
    let status = match status {
        SolverStatus::Converged
            if kkt > opts.tol || primal > opts.feas_tol || viol > opts.feas_tol =>
        {
            SolverStatus::MaxIterations
        }
        s => s,
    };
    SolverReport {
        objective: prob.objective(&x),
        primal_residual: primal,
        constraint_violation: viol,
        kkt_residual: kkt,
        iterations,
        status,
        objective_trace,
        solution: x.iter().copied().collect(),
    }
}

/// `min ||a z - b||^2  s.t.  c z >= l` with unit-norm rows in `c`.
struct Reduced {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DMatrix<f64>,
    l: DVector<f64>,
}

impl Reduced {
    fn objective(&self, z: &DVector<f64>) -> f64 {
        (&self.a * z - &self.b).norm_squared()
    }

    fn factor(&self, p: &DMatrix<f64>, rho: f64) -> Cholesky<f64, Dyn> {
        let k = p.nrows();
        let m = p + DMatrix::identity(k, k) * SIGMA + self.c.tr_mul(&self.c) * rho;
        Cholesky::new(m).expect("P + sigma I + rho C'C is positive definite")
    }

    fn solve(
        &self,
        opts: &SolverOptions,
    ) -> (DVector<f64>, usize, SolverStatus, Vec<f64>) {
        let k = self.a.ncols();
        let r = self.c.nrows();
        let p = self.a.tr_mul(&self.a) * 2.0;
        let q = -(self.a.tr_mul(&self.b) * 2.0);

        let mut rho = 0.1;
        let mut chol = self.factor(&p, rho);
        let mut x = DVector::zeros(k);
        let mut z = DVector::from_fn(r, |i, _| self.l[i].max(0.0));
        let mut y = DVector::<f64>::zeros(r);
        let mut y_prev = y.clone();

        let mut trace = Vec::new();
        let mut incumbent: Option<(f64, DVector<f64>)> = None;
        let mut best_prim = f64::INFINITY;
        let mut stall = 0usize;

        for iter in 1..=opts.max_iter {
            let rhs = &x * SIGMA - &q + self.c.tr_mul(&(&z * rho - &y));
            let x_tilde = chol.solve(&rhs);
            let z_tilde = &self.c * &x_tilde;
            x = &x_tilde * RELAX + &x * (1.0 - RELAX);
            let z_relax = &z_tilde * RELAX + &z * (1.0 - RELAX);
            let z_new = DVector::from_fn(r, |i, _| (z_relax[i] + y[i] / rho).max(self.l[i]));
            y += (&z_relax - &z_new) * rho;
            z = z_new;

            let cx = &self.c * &x;
            let prim = (&cx - &z).amax();
            let px = &p * &x;
            let cty = self.c.tr_mul(&y);
            let dual = (&px + &q + &cty).amax();
            let prim_scale = 1.0 + cx.amax().max(z.amax());
            let dual_scale = 1.0 + px.amax().max(cty.amax()).max(q.amax());

            if prim < best_prim * (1.0 - 1e-6) {
                best_prim = prim;
                stall = 0;
            } else {
                stall += 1;
            }

            if iter % POLISH_EVERY == 0 || (prim <= opts.feas_tol * prim_scale && dual <= opts.tol * dual_scale) {
                if let Some(zp) = self.polish(&x, &y, opts) {
                    let obj = self.objective(&zp);
                    trace.push(incumbent.as_ref().map_or(obj, |(b, _)| b.min(obj)));
                    return (zp, iter, SolverStatus::Converged, trace);
                }
                if (&self.c * &x - &self.l).min() >= -opts.feas_tol {
                    let obj = self.objective(&x);
                    if incumbent.as_ref().is_none_or(|(b, _)| obj < *b) {
                        incumbent = Some((obj, x.clone()));
                    }
                }
                if let Some((b, _)) = &incumbent {
                    trace.push(*b);
                }
            }

            if iter % POLISH_EVERY == 0 {
                // Primal infeasibility certificate: C' dy ~ 0, dy <= 0, l' dy > 0.
                let dy = &y - &y_prev;
                let nd = dy.amax();
                if nd > 1e-12 {
                    let ctdy = self.c.tr_mul(&dy).amax();
                    let pos = dy.max();
                    let ldy = self.l.dot(&dy.map(|v| v.min(0.0)));
                    if ctdy <= 1e-9 * nd && pos <= 1e-9 * nd && ldy > 1e-9 * nd {
                        return (x, iter, SolverStatus::Infeasible, trace);
                    }
                }
                y_prev = y.clone();

                let ratio = ((prim / prim_scale) / (dual / dual_scale).max(1e-300)).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho = (rho * ratio).clamp(1e-6, 1e6);
                    chol = self.factor(&p, rho);
                }
            }

            if stall >= opts.stall_iter && best_prim > opts.feas_tol * prim_scale * 100.0 {
                return (x, iter, SolverStatus::Infeasible, trace);
            }
        }
        let z = incumbent.map_or(x, |(_, z)| z);
        (z, opts.max_iter, SolverStatus::MaxIterations, trace)
    }

    /// Exact solve on a guessed active set with a few add/drop corrections.
    fn polish(&self, x: &DVector<f64>, y: &DVector<f64>, opts: &SolverOptions) -> Option<DVector<f64>> {
        let r = self.c.nrows();
        let cx = &self.c * x;
        let gap_tol = 1e-6 * (1.0 + cx.amax());
        let mut guess: Vec<usize> = (0..r)
            .filter(|&i| cx[i] - self.l[i] <= gap_tol || y[i] < -1e-12)
            .collect();
        guess.sort_by(|&i, &j| (cx[i] - self.l[i]).total_cmp(&(cx[j] - self.l[j])));
        let mut active = self.independent(&guess);
        for _ in 0..POLISH_ROUNDS {
            let z = self.solve_on(&active)?;
            let grad = self.a.tr_mul(&(&self.a * &z - &self.b)) * 2.0;
            let ca = DMatrix::from_fn(active.len(), self.c.ncols(), |i, j| self.c[(active[i], j)]);
            let mult = if active.is_empty() {
                DVector::zeros(0)
            } else {
                lstsq(&ca.transpose(), &grad)
            };
            let stat = if active.is_empty() {
                grad.clone()
            } else {
                &grad - ca.transpose() * &mult
            };
            let scale = 1.0 + grad.amax();
            let slack = &self.c * &z - &self.l;
            let worst_viol = (0..r)
                .filter(|i| !active.contains(i))
                .map(|i| (i, slack[i]))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let worst_mult = (0..active.len())
                .map(|k| (k, mult[k]))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let viol_bad = worst_viol.filter(|&(_, s)| s < -opts.feas_tol * 0.1);
            let mult_bad = worst_mult.filter(|&(_, m)| m < -opts.tol * 0.1 * scale);
            if viol_bad.is_none() && mult_bad.is_none() && stat.amax() <= opts.tol * 0.1 * scale {
                return Some(z);
            }
            if let Some((i, _)) = viol_bad {
                active.push(i);
                active = self.independent(&active);
                if !active.contains(&i) {
                    return None;
                }
                active.sort_unstable();
            } else if let Some((k, _)) = mult_bad {
                active.remove(k);
            } else {
                return None;
            }
        }
        None
    }

    /// Greedy subset of `rows` (in order) whose constraint normals are linearly independent.
    fn independent(&self, rows: &[usize]) -> Vec<usize> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut kept = Vec::new();
        for &i in rows {
            let mut v = self.c.row(i).transpose();
            for b in &basis {
                v -= b * b.dot(&v);
            }
            let nrm = v.norm();
            if nrm > 1e-8 {
                basis.push(v / nrm);
                kept.push(i);
            }
        }
        kept
    }

    fn solve_on(&self, active: &[usize]) -> Option<DVector<f64>> {
        let k = self.c.ncols();
        let ca = DMatrix::from_fn(active.len(), k, |i, j| self.c[(active[i], j)]);
        let la = DVector::from_fn(active.len(), |i, _| self.l[active[i]]);
        let (z0, null) = affine_parametrization(&ca, &la, 1e-10)?;
        if null.ncols() == 0 {
            return Some(z0);
        }
        let u = lstsq(&(&self.a * &null), &(&self.b - &self.a * &z0));
        Some(z0 + null * u)
    }
}
