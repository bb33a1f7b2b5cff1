//! Wall time against state size for dense sensitivity propagation and the
//! streamed engine. Timings are not reproducible; only their fits are checked.

use pgf_core::numerics::{ols_slope_test, RegressionReport};
use pgf_core::oracle::{dense_rtrl_time, pgf_time};

use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

fn best_of(repeats: usize, mut f: impl FnMut() -> anyhow::Result<f64>) -> anyhow::Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        best = best.min(f()?);
    }
    Ok(best)
}

fn loglog(ns: &[usize], secs: &[f64]) -> anyhow::Result<RegressionReport> {
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = secs.iter().map(|s| s.max(1e-12).ln()).collect();
    Ok(ols_slope_test(&xs, &ys)?)
}

pub fn run(cfg: &Config, ctx: &RunContext) -> anyhow::Result<Outcome> {
    let ns = &cfg.complexity_n;
    let mut rtrl = Vec::new();
    let mut pgf = Vec::new();
    // runs on the calling thread only
    for &n in ns {
        rtrl.push(best_of(cfg.complexity_repeats, || {
            Ok(dense_rtrl_time(n, cfg.complexity_rtrl_len, ctx.seed))
        })?);
        pgf.push(best_of(cfg.complexity_repeats, || {
            Ok(pgf_time(cfg.complexity_d, n, cfg.complexity_pgf_len, cfg.block, ctx.seed)?)
        })?);
    }
    let mut csv = Csv::new("complexity_timings.csv", &["method", "N", "seconds"]);
    for (method, secs) in [("dense_rtrl", &rtrl), ("pgf", &pgf)] {
        for (&n, &s) in ns.iter().zip(secs.iter()) {
            csv.row(&[&method, &n, &Sci(s)]);
        }
    }
    let rtrl_fit = loglog(ns, &rtrl)?;
    let pgf_fit = loglog(ns, &pgf)?;
    let mut breaches = Vec::new();
    if !(rtrl_fit.slope >= cfg.complexity_rtrl_min_slope) {
        breaches.push(format!(
            "dense_rtrl log-log slope {:.3} < {}",
            rtrl_fit.slope, cfg.complexity_rtrl_min_slope
        ));
    }
    if !(pgf_fit.slope <= cfg.complexity_pgf_max_slope) {
        breaches.push(format!(
            "pgf log-log slope {:.3} > {}",
            pgf_fit.slope, cfg.complexity_pgf_max_slope
        ));
    }
    let fits = serde_json::json!({"dense_rtrl": rtrl_fit, "pgf": pgf_fit});
    let mut w = Writer::new(ctx)?;
    w.timing_csv(&csv)?;
    w.json("complexity_fit.json", &fits, false)?;
    let summary = serde_json::json!({
        "dense_rtrl_slope": rtrl_fit.slope,
        "pgf_slope": pgf_fit.slope,
        "rtrl_min_slope": cfg.complexity_rtrl_min_slope,
        "pgf_max_slope": cfg.complexity_pgf_max_slope,
    });
    w.finish("complexity", cfg, Precision::F64, breaches.is_empty(), breaches, summary, false)
}
