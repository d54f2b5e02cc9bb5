use nalgebra::DMatrix;

use super::{estimate_att, AttEstimate};
use crate::error::{Error, Result};
use crate::panel::PanelMatrix;

/// Two-way within transformation of a balanced panel.
fn within(m: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = m.column_mean();
    let cols = m.row_mean();
    let all = m.mean();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, t| m[(i, t)] - rows[i] - cols[t] + all)
}

/// TWFE coefficient on the treatment dummy and the untreated fitted values
/// `ybar*_i + ybar*_t - ybar*` of `y* = y - tau D` on the treated post cells.
fn twfe(p: &PanelMatrix, y: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if p.n() < 2 || p.t() < 2 {
        return Err(Error::Design("two-way fixed effects need N >= 2 and T >= 2".into()));
    }
    let d = p.treatment();
    let d_w = within(&d);
    let ss = d_w.norm_squared();
    if ss <= 1e-12 * (p.n() * p.t()) as f64 {
        return Err(Error::Design("treatment dummy is collinear with the fixed effects".into()));
    }
    let tau = d_w.dot(y) / ss;
    let y_star = y - &d * tau;
    let rows = y_star.column_mean();
    let cols = y_star.row_mean();
    let all = y_star.mean();
    let (n0, t0) = (p.n0(), p.t0());
    let fitted = DMatrix::from_fn(p.n1(), p.post_len(), |i, t| rows[n0 + i] + cols[t0 + t] - all);
    Ok((tau, fitted))
}

/// Feasible DiD: OLS on unit and period effects plus the treatment dummy.
///
/// Counterfactuals are the fitted two-way effects, so `att_pooled` equals the
/// TWFE coefficient while individual effects keep the residual variation.
pub fn fit_fdid(p: &PanelMatrix) -> Result<AttEstimate> {
    let (_, fitted) = twfe(p, p.outcomes())?;
    estimate_att(p, &fitted)
}

/// Infeasible DiD: feasible DiD after removing the demeaned interactive
/// effects `oracle` (N x T); they are added back to the counterfactuals.
pub fn fit_idid(p: &PanelMatrix, oracle: Option<&DMatrix<f64>>) -> Result<AttEstimate> {
    let oracle = oracle.ok_or_else(|| {
        Error::Config("infeasible DiD needs the demeaned interactive fixed effects".into())
    })?;
    if oracle.shape() != p.outcomes().shape() {
        return Err(Error::Dimension(format!(
            "oracle is {:?}, panel is {:?}",
            oracle.shape(),
            p.outcomes().shape()
        )));
    }
    let (_, mut fitted) = twfe(p, &(p.outcomes() - oracle))?;
    let block = oracle.view((p.n0(), p.t0()), (p.n1(), p.post_len()));
    fitted += block;
    estimate_att(p, &fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovariateTable;
    use approx::assert_relative_eq;

    fn panel(y: DMatrix<f64>, n0: usize, t0: usize) -> PanelMatrix {
        let (n, t) = y.shape();
        PanelMatrix::new(
            y,
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
    fn two_by_two_identity() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 2.0, 9.0]);
        let att = fit_fdid(&panel(y, 1, 1)).unwrap();
        assert_relative_eq!(att.att_pooled, (9.0 - 2.0) - (4.0 - 1.0), epsilon = 1e-12);
    }

    #[test]
    fn matches_dummy_regression() {
        let mut s = 3u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let (n, t, n0, t0) = (5, 4, 3, 2);
        let y = DMatrix::from_fn(n, t, |_, _| rnd() * 5.0);
        let p = panel(y.clone(), n0, t0);
        // Design: D, unit dummies, period dummies 2..T.
        let k = 1 + n + (t - 1);
        let x = DMatrix::from_fn(n * t, k, |r, c| {
            let (i, tt) = (r / t, r % t);
            match c {
                0 => f64::from(i >= n0 && tt >= t0),
                c if c <= n => f64::from(c - 1 == i),
                c => f64::from(c - n == tt),
            }
        });
        let yv = nalgebra::DVector::from_fn(n * t, |r, _| y[(r / t, r % t)]);
        let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * yv;
        let att = fit_fdid(&p).unwrap();
        assert_relative_eq!(att.att_pooled, beta[0], epsilon = 1e-10);
    }

    #[test]
    fn translation_invariant() {
        let y = DMatrix::from_fn(4, 3, |i, t| (i * 7 + t * 3) as f64 % 5.0);
        let a = fit_fdid(&panel(y.clone(), 2, 2)).unwrap().att_pooled;
        let b = fit_fdid(&panel(y.add_scalar(100.0), 2, 2)).unwrap().att_pooled;
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn zero_oracle_equals_feasible() {
        let y = DMatrix::from_fn(4, 3, |i, t| ((i + 1) * (t + 2)) as f64);
        let p = panel(y, 2, 2);
        let a = fit_fdid(&p).unwrap();
        let b = fit_idid(&p, Some(&DMatrix::zeros(4, 3))).unwrap();
        assert_eq!(a, b);
        assert!(matches!(fit_idid(&p, None), Err(Error::Config(_))));
    }
}
