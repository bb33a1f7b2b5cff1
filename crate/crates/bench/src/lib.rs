//! Experiment harness for the streamed tangent engine in `pgf-core`.
//!
//! Each command writes one or more CSV files, a `<command>.summary.json`
//! and a `<command>.manifest.json` into the output directory.

// `!(err <= tol)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;

pub use commands::Command;
pub use config::Config;
pub use report::{Outcome, Precision, RunContext};
