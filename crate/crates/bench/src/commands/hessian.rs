//! Second-order streamed pass against differences of first-order tangents.

use pgf_core::hessian::pgf_hvp;
use pgf_core::numerics::relative_error;
use pgf_core::oracle::fd_hvp;
use pgf_core::sample::normal_vec;
use pgf_core::tangent::pgf_jvp_dense;
use pgf_core::{BlockPlan, MemoryMeter, Scalar, ScanStrategy};
use serde::Serialize;

use super::widen;
use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub check: &'static str,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    fn new(check: &'static str, rel_err: f64, tol: f64) -> Self {
        Check {
            check,
            rel_err,
            tol,
            pass: rel_err <= tol,
        }
    }
}

pub fn checks<T: Scalar>(cfg: &Config, seed: u64) -> anyhow::Result<Vec<Check>> {
    let (len, d, n) = (cfg.hessian_len, cfg.hessian_d, cfg.hessian_n);
    let params = cfg.params::<T>(d, n, seed);
    let draw = |stream| -> Vec<T> {
        normal_vec::<f64>(seed, stream, len * d).into_iter().map(T::lit).collect()
    };
    let (u, v, w) = (draw(1), draw(2), draw(3));
    let plan = BlockPlan::new(len, cfg.block)?;
    let vw = pgf_hvp(&params, &u, &v, &w, &plan, &MemoryMeter::new())?;
    let wv = pgf_hvp(&params, &u, &w, &v, &plan, &MemoryMeter::new())?;
    let fd = fd_hvp(&params.cast::<f64>(), &widen(&u), &widen(&v), &widen(&w), cfg.fd_eps)?;
    let first = pgf_jvp_dense(&params, &u, &v, None, ScanStrategy::Sequential)?;
    Ok(vec![
        Check::new("fd_hvp", relative_error(&vw.d2y, &fd), cfg.hessian_tol),
        Check::new("symmetry", relative_error(&vw.d2y, &wv.d2y), cfg.hessian_symmetry_tol),
        Check::new(
            "first_order",
            relative_error(&vw.dy_v, &first.dy),
            cfg.verify_tol_unrolled,
        ),
    ])
}

pub fn run<T: Scalar>(cfg: &Config, ctx: &RunContext, prec: Precision) -> anyhow::Result<Outcome> {
    let rows = checks::<T>(cfg, ctx.seed)?;
    let mut csv = Csv::new("hessian.csv", &["check", "rel_err", "tol", "pass"]);
    let mut breaches = Vec::new();
    for r in &rows {
        csv.row(&[&r.check, &Sci(r.rel_err), &Sci(r.tol), &r.pass]);
        if !r.pass {
            breaches.push(format!("{}: rel_err={:e} > tol={:e}", r.check, r.rel_err, r.tol));
        }
    }
    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    let summary = serde_json::json!({ "L": cfg.hessian_len, "checks": rows });
    w.finish("hessian", cfg, prec, breaches.is_empty(), breaches, summary, true)
}
