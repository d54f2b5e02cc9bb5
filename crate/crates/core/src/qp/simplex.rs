use nalgebra::{DMatrix, DVector, SVD};

use super::{SolverOptions, SolverReport, SolverStatus};
use crate::error::{Error, Result};
use crate::linalg::all_finite;

/// Euclidean projection onto `{w : sum(w) = 1, w >= 0}` (sort and threshold).
pub fn project_simplex(v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("cannot project an empty vector".into()));
    }
    if !all_finite(v.iter()) {
        return Err(Error::Numeric("project_simplex input".into()));
    }
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (k as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut w = v.map(|x| (x - theta).max(0.0));
    let s = w.sum();
    w /= s;
    Ok(w)
}

/// `min ||donors w - target||^2` over the simplex.
pub fn solve_simplex_ls(donors: &DMatrix<f64>, target: &DVector<f64>) -> Result<SolverReport> {
    solve_simplex_qp(donors, target, None, &SolverOptions::default())
}

/// `min ||a w - b||^2 + c'w` over the simplex.
///
/// Primal active-set method on the support of `w`. Each step minimizes the
/// objective over the affine hull of the current support (following a
/// zero-curvature direction when the reduced problem is unbounded), with an
/// exact line search clipped at the first support variable to hit zero. At a
/// support-stationary point the most negative simplex multiplier enters.
pub fn solve_simplex_qp(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<SolverReport> {
    let (m, n) = a.shape();
    if n == 0 {
        return Err(Error::Dimension("simplex problem with no columns".into()));
    }
    if b.len() != m {
        return Err(Error::Dimension(format!(
            "design has {m} rows but target has {}",
            b.len()
        )));
    }
    if let Some(c) = c {
        if c.len() != n {
            return Err(Error::Dimension("linear term length differs from columns".into()));
        }
        if !all_finite(c.iter()) {
            return Err(Error::Numeric("simplex linear term".into()));
        }
    }
    if !all_finite(a.iter()) || !all_finite(b.iter()) {
        return Err(Error::Numeric("simplex least-squares data".into()));
    }

    let objective = |w: &DVector<f64>| -> f64 {
        let fit = (a * w - b).norm_squared();
        fit + c.map_or(0.0, |c| c.dot(w))
    };

    if n == 1 {
        let w = DVector::from_element(1, 1.0);
        let obj = objective(&w);
        return Ok(SolverReport {
            solution: vec![1.0],
            objective: obj,
            primal_residual: 0.0,
            constraint_violation: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
            status: SolverStatus::Converged,
            objective_trace: vec![obj],
        });
    }

    // A common scale keeps the simplex intact.
    let scale = a.amax().max(b.amax());
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let a_s = a / scale;
    let b_s = b / scale;
    let c_s = c.map(|c| c / (scale * scale));

    let mut solver = ActiveSet::new(&a_s, &b_s, c_s.as_ref());
    let (status, iterations) = solver.run(opts);
    let w = solver.w.clone();
    let kkt = solver.kkt_residual();
    let trace = solver
        .trace
        .iter()
        .map(|v| v * scale * scale)
        .collect::<Vec<_>>();

    Ok(SolverReport {
        objective: objective(&w),
        primal_residual: (w.sum() - 1.0).abs(),
        constraint_violation: w.iter().fold(0.0_f64, |acc, &x| acc.max(-x)),
        kkt_residual: kkt,
        iterations,
        status,
        objective_trace: trace,
        solution: w.iter().copied().collect(),
    })
}

struct ActiveSet<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    c: Option<&'a DVector<f64>>,
    w: DVector<f64>,
    support: Vec<usize>,
    trace: Vec<f64>,
}

impl<'a> ActiveSet<'a> {
    fn new(a: &'a DMatrix<f64>, b: &'a DVector<f64>, c: Option<&'a DVector<f64>>) -> Self {
        let n = a.ncols();
        // Start at the best vertex.
        let mut best = (0, f64::INFINITY);
        for j in 0..n {
            let v = (a.column(j) - b).norm_squared() + c.map_or(0.0, |c| c[j]);
            if v < best.1 {
                best = (j, v);
            }
        }
        let mut w = DVector::zeros(n);
        w[best.0] = 1.0;
        Self {
            a,
            b,
            c,
            w,
            support: vec![best.0],
            trace: vec![best.1],
        }
    }

    fn objective(&self) -> f64 {
        (self.a * &self.w - self.b).norm_squared() + self.c.map_or(0.0, |c| c.dot(&self.w))
    }

    fn gradient(&self) -> DVector<f64> {
        let mut g = 2.0 * self.a.tr_mul(&(self.a * &self.w - self.b));
        if let Some(c) = self.c {
            g += c;
        }
        g
    }

    /// Relative violation of the simplex KKT conditions.
    fn kkt_residual(&self) -> f64 {
        let g = self.gradient();
        let on: Vec<f64> = self.support.iter().map(|&j| g[j]).collect();
        let nu = -on.iter().sum::<f64>() / on.len() as f64;
        let mut res = 0.0_f64;
        for (j, &gj) in g.iter().enumerate() {
            let mu = gj + nu;
            if self.support.contains(&j) {
                res = res.max(mu.abs());
            } else {
                res = res.max(-mu);
            }
        }
        res / (1.0 + g.amax())
    }

    /// Search direction on the support (difference basis `p = (z, -sum z)`).
    fn direction(&self, g: &DVector<f64>) -> Option<DVector<f64>> {
        let k = self.support.len();
        if k < 2 {
            return None;
        }
        let m = self.a.nrows();
        let last = self.support[k - 1];
        let mut red = DMatrix::zeros(m, k - 1);
        let mut r = DVector::zeros(k - 1);
        for (i, &j) in self.support[..k - 1].iter().enumerate() {
            red.set_column(i, &(self.a.column(j) - self.a.column(last)));
            r[i] = g[j] - g[last];
        }
        let scale = 1.0 + g.amax();
        if r.amax() <= 1e-13 * scale {
            return None;
        }
        let svd = SVD::new(red, false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
        let mut newton = DVector::zeros(k - 1);
        let mut in_range = DVector::zeros(k - 1);
        for (idx, &s) in svd.singular_values.iter().enumerate() {
            if smax > 0.0 && s > 1e-10 * smax {
                let v = v_t.row(idx).transpose();
                let coef = v.dot(&r);
                in_range += &v * coef;
                newton -= &v * (coef / (2.0 * s * s));
            }
        }
        let flat = &r - &in_range;
        let z = if flat.amax() > 1e-12 * scale { -flat } else { newton };
        let mut p = DVector::zeros(self.w.len());
        let mut tail = 0.0;
        for (i, &j) in self.support[..k - 1].iter().enumerate() {
            p[j] = z[i];
            tail -= z[i];
        }
        p[last] = tail;
        Some(p)
    }

    fn run(&mut self, opts: &SolverOptions) -> (SolverStatus, usize) {
        let n = self.w.len();
        let mut stall = 0usize;
        let mut best = self.trace[0];
        for iter in 1..=opts.max_iter {
            let g = self.gradient();
            let scale = 1.0 + g.amax();
            let mut moved = false;
            if let Some(p) = self.direction(&g) {
                let slope = g.dot(&p);
                if slope < 0.0 {
                    let ap = self.a * &p;
                    let curv = ap.norm_squared();
                    let mut alpha = if curv > 0.0 { -slope / (2.0 * curv) } else { f64::INFINITY };
                    let mut blocking = None;
                    for &j in &self.support {
                        if p[j] < 0.0 {
                            let lim = self.w[j] / -p[j];
                            if lim < alpha {
                                alpha = lim;
                                blocking = Some(j);
                            }
                        }
                    }
                    if alpha.is_finite() && alpha * p.amax() > 1e-16 {
                        self.w.axpy(alpha, &p, 1.0);
                        if let Some(j) = blocking {
                            self.w[j] = 0.0;
                        }
                        moved = true;
                    } else if let Some(j) = blocking {
                        self.w[j] = 0.0;
                        moved = true;
                    }
                    self.clean_support();
                }
            }
            if !moved {
                // Support-stationary: price the remaining coordinates.
                let on: f64 = self.support.iter().map(|&j| g[j]).sum::<f64>();
                let nu = -on / self.support.len() as f64;
                let mut enter = None;
                let mut most = -opts.tol * scale;
                for j in 0..n {
                    if !self.support.contains(&j) && g[j] + nu < most {
                        most = g[j] + nu;
                        enter = Some(j);
                    }
                }
                match enter {
                    Some(j) => {
                        self.support.push(j);
                        self.support.sort_unstable();
                    }
                    None => {
                        self.trace.push(self.objective().min(best));
                        return (SolverStatus::Converged, iter);
                    }
                }
            }
            let obj = self.objective();
            if obj < best - 1e-15 * (1.0 + best.abs()) {
                best = obj;
                stall = 0;
            } else {
                stall += 1;
            }
            self.trace.push(best);
            if stall > opts.stall_iter {
                return (SolverStatus::MaxIterations, iter);
            }
        }
        (SolverStatus::MaxIterations, opts.max_iter)
    }

    fn clean_support(&mut self) {
        let w = &mut self.w;
        self.support.retain(|&j| {
            if w[j] <= 0.0 {
                w[j] = 0.0;
                false
            } else {
                true
            }
        });
        let s = w.sum();
        *w /= s;
    }
}
