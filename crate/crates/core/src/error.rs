use thiserror::Error;

use crate::qp::SolverStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite input: {0}")]
    Numeric(String),

    #[error("unbalanced panel: {0}")]
    Balance(String),

    #[error("treatment is not a single simultaneous adoption: {0}")]
    StaggeredAdoption(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("invalid train/test split: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Sum-to-one weights cannot be expressed as `omega + x_i alpha` for
    /// several treated units once `x` is continuous: the per-unit sum
    /// constraints become inconsistent.
    #[error(
        "covariate `{0}` is continuous; random-coefficient weights summing to one are \
         infeasible with continuous covariates and more than one treated unit \
         (recode it into dummies)"
    )]
    ContinuousCovariate(String),

    #[error("degenerate design: {0}")]
    Design(String),

    #[error("group `{0}` has fewer than two treated units")]
    GroupSize(String),

    #[error("treatment intercept calibration failed: {0}")]
    Calibration(String),

    #[error("factor cross-product is singular: {0}")]
    DegenerateFactor(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("solver returned {status:?}{}: {detail}", unit.map(|u| format!(" for treated unit {u}")).unwrap_or_default())]
    Solver {
        unit: Option<usize>,
        status: SolverStatus,
        detail: String,
    },
}

impl Error {
    pub(crate) fn with_unit(self, unit: usize) -> Self {
        match self {
            Error::Solver { status, detail, .. } => Error::Solver {
                unit: Some(unit),
                status,
                detail,
            },
            other => other,
        }
    }
}
