pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod panel;
pub mod qp;
pub mod theory;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
