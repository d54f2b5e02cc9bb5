//! Constrained least squares.
//!
//! Two entry points: [`solve_simplex_ls`] / [`solve_simplex_qp`] for weights on
//! the probability simplex, and [`solve_constrained_ls`] for
//! `min ||A x - b||^2  s.t.  E x = f,  G x >= 0`.

mod admm;
pub(crate) mod kron;
mod simplex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, nnls};

pub use admm::solve_constrained_ls;
pub use simplex::{project_simplex, solve_simplex_ls, solve_simplex_qp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Stationarity / dual residual tolerance.
    pub tol: f64,
    /// Primal feasibility tolerance.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Consecutive non-improving iterations before declaring infeasibility.
    pub stall_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            feas_tol: 1e-8,
            max_iter: 50_000,
            stall_iter: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub objective: f64,
    /// Equality residual `||E x - f||_inf`.
    pub primal_residual: f64,
    /// Largest violation of `G x >= 0`, zero when satisfied.
    pub constraint_violation: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolverStatus,
    /// Objective of the best feasible iterate after each outer iteration.
    pub objective_trace: Vec<f64>,
}

impl SolverReport {
    pub fn solution_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.solution)
    }

    pub fn is_converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }

    /// Turns a non-converged report into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            SolverStatus::Converged => Ok(self),
            status => Err(Error::Solver {
                unit: None,
                status,
                detail: format!(
                    "after {} iterations: kkt {:.3e}, violation {:.3e}",
                    self.iterations, self.kkt_residual, self.constraint_violation
                ),
            }),
        }
    }
}

/// `min ||A x - b||^2` subject to `E x = f` and `G x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedLsProblem {
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    pub eq_lhs: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub nonneg_lhs: DMatrix<f64>,
}

impl ConstrainedLsProblem {
    pub fn new(design: DMatrix<f64>, target: DVector<f64>) -> Self {
        let p = design.ncols();
        Self {
            design,
            target,
            eq_lhs: DMatrix::zeros(0, p),
            eq_rhs: DVector::zeros(0),
            nonneg_lhs: DMatrix::zeros(0, p),
        }
    }

    pub fn with_equalities(mut self, lhs: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_lhs = lhs;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_nonneg(mut self, lhs: DMatrix<f64>) -> Self {
        self.nonneg_lhs = lhs;
        self
    }

    /// Weights on the simplex: `1'x = 1`, `x >= 0`.
    pub fn simplex(design: DMatrix<f64>, target: DVector<f64>) -> Self {
        let p = design.ncols();
        Self::new(design, target)
            .with_equalities(DMatrix::from_element(1, p, 1.0), DVector::from_element(1, 1.0))
            .with_nonneg(DMatrix::identity(p, p))
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if self.target.len() != self.design.nrows() {
            return Err(Error::Dimension(format!(
                "design has {} rows but target has {}",
                self.design.nrows(),
                self.target.len()
            )));
        }
        if self.eq_lhs.ncols() != p || self.eq_rhs.len() != self.eq_lhs.nrows() {
            return Err(Error::Dimension("equality block does not match design".into()));
        }
        if self.nonneg_lhs.ncols() != p {
            return Err(Error::Dimension("inequality block does not match design".into()));
        }
        let finite = crate::linalg::all_finite(self.design.iter())
            && crate::linalg::all_finite(self.target.iter())
            && crate::linalg::all_finite(self.eq_lhs.iter())
            && crate::linalg::all_finite(self.eq_rhs.iter())
            && crate::linalg::all_finite(self.nonneg_lhs.iter());
        if !finite {
            return Err(Error::Numeric("constrained least-squares problem".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (&self.design * x - &self.target).norm_squared()
    }

    pub fn equality_residual(&self, x: &DVector<f64>) -> f64 {
        if self.eq_lhs.nrows() == 0 {
            return 0.0;
        }
        (&self.eq_lhs * x - &self.eq_rhs).amax()
    }

    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        if self.nonneg_lhs.nrows() == 0 {
            return 0.0;
        }
        (&self.nonneg_lhs * x).iter().fold(0.0_f64, |m, &v| m.max(-v))
    }

    /// KKT residual of `x` with the best multipliers for the given active set.
    ///
    /// Inequality multipliers live on constraints with `g_i x <= act_tol` and
    /// are fitted under a sign constraint, which stays exact when the active
    /// normals are linearly dependent. The stationarity residual is reported
    /// relative to `1 + ||grad||_inf`.
    pub fn kkt_residual(&self, x: &DVector<f64>, act_tol: f64) -> f64 {
        let grad = 2.0 * self.design.transpose() * (&self.design * x - &self.target);
        let active: Vec<usize> = (0..self.nonneg_lhs.nrows())
            .filter(|&i| (self.nonneg_lhs.row(i) * x)[0] <= act_tol)
            .collect();
        // grad = E' y + G_A' z with z >= 0: project out range(E'), fit z by
        // nonnegative least squares, then recover y.
        let p = self.dim();
        let et = self.eq_lhs.transpose();
        let perp = |v: &DVector<f64>| v - &et * lstsq(&et, v);
        let ga = DMatrix::from_fn(p, active.len(), |i, k| self.nonneg_lhs[(active[k], i)]);
        let mut ga_perp = ga.clone();
        for k in 0..active.len() {
            ga_perp.set_column(k, &perp(&ga.column(k).into_owned()));
        }
        let z = nnls(&ga_perp, &perp(&grad));
        let rest = &grad - &ga * z;
        let stat = &rest - &et * lstsq(&et, &rest);
        stat.amax() / (1.0 + grad.amax())
    }
}
