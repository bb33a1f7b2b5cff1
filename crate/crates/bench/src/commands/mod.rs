pub mod complexity;
pub mod ghost;
pub mod hessian;
pub mod invariance;
pub mod memory;
pub mod params;
pub mod stiffness;
pub mod verify;

use pgf_core::sample::normal_vec;
use pgf_core::Scalar;

use crate::config::Config;
use crate::report::{Outcome, Precision, RunContext};

/// Gaussian `(u, ∇u)` of shape `[len, d]`, drawn in f64 then rounded to `T`.
pub(crate) fn gaussian_pair<T: Scalar>(seed: u64, len: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let u: Vec<f64> = normal_vec(seed, 1, len * d);
    let du: Vec<f64> = normal_vec(seed, 2, len * d);
    (
        u.into_iter().map(T::lit).collect(),
        du.into_iter().map(T::lit).collect(),
    )
}

pub(crate) fn widen<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Verify,
    Invariance,
    GhostPulse,
    Stiffness,
    Memory,
    Complexity,
    Hessian,
    Params,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Verify,
        Command::Invariance,
        Command::GhostPulse,
        Command::Stiffness,
        Command::Memory,
        Command::Complexity,
        Command::Hessian,
        Command::Params,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Invariance => "invariance",
            Command::GhostPulse => "ghost_pulse",
            Command::Stiffness => "stiffness",
            Command::Memory => "memory",
            Command::Complexity => "complexity",
            Command::Hessian => "hessian",
            Command::Params => "params",
        }
    }

    /// Precision used when `--precision` is not given.
    pub fn default_precision(self) -> Precision {
        match self {
            Command::Invariance | Command::Stiffness => Precision::F32,
            _ => Precision::F64,
        }
    }

    pub fn run(self, cfg: &Config, ctx: &RunContext) -> anyhow::Result<Outcome> {
        let prec = ctx.precision.unwrap_or(self.default_precision());
        match (self, prec) {
            (Command::Verify, Precision::F64) => verify::run::<f64>(cfg, ctx, prec),
            (Command::Verify, Precision::F32) => verify::run::<f32>(cfg, ctx, prec),
            (Command::Invariance, Precision::F64) => invariance::run::<f64>(cfg, ctx, prec),
            (Command::Invariance, Precision::F32) => invariance::run::<f32>(cfg, ctx, prec),
            (Command::GhostPulse, Precision::F64) => ghost::run::<f64>(cfg, ctx, prec),
            (Command::GhostPulse, Precision::F32) => ghost::run::<f32>(cfg, ctx, prec),
            // always single precision against a double oracle
            (Command::Stiffness, _) => stiffness::run(cfg, ctx),
            (Command::Memory, Precision::F64) => memory::run::<f64>(cfg, ctx, prec),
            (Command::Memory, Precision::F32) => memory::run::<f32>(cfg, ctx, prec),
            (Command::Complexity, _) => complexity::run(cfg, ctx),
            (Command::Hessian, Precision::F64) => hessian::run::<f64>(cfg, ctx, prec),
            (Command::Hessian, Precision::F32) => hessian::run::<f32>(cfg, ctx, prec),
            (Command::Params, Precision::F64) => params::run::<f64>(cfg, ctx, prec),
            (Command::Params, Precision::F32) => params::run::<f32>(cfg, ctx, prec),
        }
    }
}
