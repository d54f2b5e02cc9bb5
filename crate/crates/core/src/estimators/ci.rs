use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::AttEstimate;
use crate::error::{Error, Result};

/// Attached to every interval report.
pub const CI_CAVEAT: &str = "t-interval over individual effects; uncertainty in the estimated \
                             weights is not included, so true intervals could be wider";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupInterval {
    pub group: String,
    /// Zero-based post-period index.
    pub period: usize,
    pub n: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCiReport {
    pub level: f64,
    pub method: &'static str,
    pub caveat: &'static str,
    pub intervals: Vec<GroupInterval>,
}

/// Per-group, per-period mean effect with a two-sided t-interval.
///
/// `groups[i]` labels treated unit `i`; groups are reported in order of first
/// appearance.
pub fn group_att_ci(att: &AttEstimate, groups: &[String], level: f64) -> Result<GroupCiReport> {
    let effects = &att.individual_effects;
    if groups.len() != effects.nrows() {
        return Err(Error::Dimension(format!(
            "{} group labels for {} treated units",
            groups.len(),
            effects.nrows()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let mut order: Vec<&str> = Vec::new();
    for g in groups {
        if !order.contains(&g.as_str()) {
            order.push(g);
        }
    }
    let mut intervals = Vec::new();
    for g in order {
        let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        let n = rows.len();
        if n < 2 {
            return Err(Error::GroupSize(g.to_string()));
        }
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
        let q = t.inverse_cdf(0.5 + level / 2.0);
        for period in 0..effects.ncols() {
            let vals: Vec<f64> = rows.iter().map(|&i| effects[(i, period)]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let half = q * (var / n as f64).sqrt();
            intervals.push(GroupInterval {
                group: g.to_string(),
                period,
                n,
                mean,
                lower: mean - half,
                upper: mean + half,
            });
        }
    }
    Ok(GroupCiReport {
        level,
        method: "two-sided t-interval",
        caveat: CI_CAVEAT,
        intervals,
    })
}
