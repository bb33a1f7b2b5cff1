//! Dense tangent path against the unrolled oracle and central differences.

use pgf_core::glr::forward;
use pgf_core::numerics::relative_error;
use pgf_core::oracle::{fd_jvp, unrolled_jvp};
use pgf_core::tangent::pgf_jvp_dense;
use pgf_core::{MemoryMeter, Scalar, ScanStrategy};
use rayon::prelude::*;
use serde::Serialize;

use super::{gaussian_pair, widen};
use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Row {
    pub len: usize,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub rel_err_unrolled: f64,
    pub rel_err_fd: f64,
}

pub fn grid(cfg: &Config, base_seed: u64) -> Vec<(usize, usize, usize, u64)> {
    let mut out = Vec::new();
    for &len in &cfg.verify_lengths {
        for &d in &cfg.verify_d {
            for &n in &cfg.verify_n {
                for _ in 0..cfg.verify_seeds {
                    out.push((len, d, n, base_seed + out.len() as u64));
                }
            }
        }
    }
    out
}

pub fn row<T: Scalar>(cfg: &Config, len: usize, d: usize, n: usize, seed: u64) -> anyhow::Result<Row> {
    let params = cfg.params::<T>(d, n, seed);
    let (u, du) = gaussian_pair::<T>(seed, len, d);
    let pgf = pgf_jvp_dense(&params, &u, &du, None, ScanStrategy::Sequential)?;

    // oracles run in double on the exact values the T path saw
    let p64 = params.cast::<f64>();
    let (u64_, du64) = (widen(&u), widen(&du));
    let unrolled = unrolled_jvp(&p64, &u64_, &du64, &MemoryMeter::new())?;
    let fd = fd_jvp(|x: &[f64]| forward(&p64, x), &u64_, &du64, cfg.fd_eps)?;
    Ok(Row {
        len,
        d,
        n,
        seed,
        rel_err_unrolled: relative_error(&pgf.dy, &unrolled.dy),
        rel_err_fd: relative_error(&pgf.dy, &fd),
    })
}

pub fn run<T: Scalar>(cfg: &Config, ctx: &RunContext, prec: Precision) -> anyhow::Result<Outcome> {
    let rows: Vec<Row> = grid(cfg, ctx.seed)
        .into_par_iter()
        .map(|(len, d, n, seed)| row::<T>(cfg, len, d, n, seed))
        .collect::<anyhow::Result<_>>()?;

    let mut csv = Csv::new(
        "verify.csv",
        &["L", "D", "N", "seed", "rel_err_unrolled", "rel_err_fd"],
    );
    let mut breaches = Vec::new();
    for r in &rows {
        csv.row(&[
            &r.len,
            &r.d,
            &r.n,
            &r.seed,
            &Sci(r.rel_err_unrolled),
            &Sci(r.rel_err_fd),
        ]);
        if !(r.rel_err_unrolled <= cfg.verify_tol_unrolled) || !(r.rel_err_fd <= cfg.verify_tol_fd) {
            breaches.push(format!(
                "L={} D={} N={} seed={} rel_err_unrolled={:e} rel_err_fd={:e}",
                r.len, r.d, r.n, r.seed, r.rel_err_unrolled, r.rel_err_fd
            ));
        }
    }
    let max_u = rows.iter().map(|r| r.rel_err_unrolled).fold(0.0, f64::max);
    let max_fd = rows.iter().map(|r| r.rel_err_fd).fold(0.0, f64::max);
    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    let summary = serde_json::json!({
        "rows": rows.len(),
        "max_rel_err_unrolled": max_u,
        "max_rel_err_fd": max_fd,
        "tol_unrolled": cfg.verify_tol_unrolled,
        "tol_fd": cfg.verify_tol_fd,
    });
    w.finish("verify", cfg, prec, breaches.is_empty(), breaches, summary, true)
}
