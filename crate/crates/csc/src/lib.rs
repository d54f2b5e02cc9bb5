//! Panel CSV ingestion, TOML run configuration and the `csc` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;

pub use error::{Error, Result};
