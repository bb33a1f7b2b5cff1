//! Exact forward-mode differentiation of selective diagonal linear
//! recurrences with a working set that does not grow with sequence length.
//!
//! Every kernel is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common precisions.

pub mod error;
pub mod glr;
pub mod hessian;
pub mod io;
pub mod isomorphs;
pub mod meter;
pub mod numerics;
pub mod oracle;
pub mod param_grad;
pub mod sample;
pub mod scalar;
pub mod scan;
pub mod tangent;
pub mod tose;

pub use error::{PgfError, Result};
pub use glr::{Activation, Discretization, GlrParams, InputMode};
pub use meter::{MemClass, MemoryMeter};
pub use scalar::Scalar;
pub use tangent::{DualState, ScanStrategy};
pub use tose::{run_tose, BlockPlan};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Params64 = glr::GlrParams<f64>;
pub type Params32 = glr::GlrParams<f32>;
pub type DualState64 = tangent::DualState<f64>;
pub type DualState32 = tangent::DualState<f32>;
pub type StepOperator64 = glr::StepOperator<f64>;
pub type StepOperator32 = glr::StepOperator<f32>;
pub type Grads64 = param_grad::GradAccumulators<f64>;
