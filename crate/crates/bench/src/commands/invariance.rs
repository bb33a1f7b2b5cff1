//! Relative error against sequence length, with an OLS slope test.

use pgf_core::numerics::{ols_slope_test, relative_error};
use pgf_core::oracle::unrolled_jvp;
use pgf_core::tose::{MemorySink, MemorySource, ToseOptions};
use pgf_core::{run_tose, BlockPlan, MemoryMeter, Scalar};
use rayon::prelude::*;

use super::{gaussian_pair, widen};
use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

/// `points` log-spaced integer lengths in `[lo, hi]`, duplicates removed.
pub fn log_lengths(lo: usize, hi: usize, points: usize) -> Vec<usize> {
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    let ratio = (hi as f64 / lo as f64).ln();
    let mut out: Vec<usize> = (0..points)
        .map(|i| (lo as f64 * (ratio * i as f64 / (points - 1) as f64).exp()).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Streamed run in `T` against the double unrolled oracle on the same inputs.
pub fn error_at<T: Scalar>(cfg: &Config, len: usize, seed: u64) -> anyhow::Result<f64> {
    let (d, n) = (cfg.invariance_d, cfg.invariance_n);
    let params = cfg.params::<T>(d, n, seed);
    let (u, du) = gaussian_pair::<T>(seed, len, d);
    let (u64_, du64) = (widen(&u), widen(&du));

    let meter = MemoryMeter::new();
    let mut src = MemorySource::new(&meter, d, u, du)?;
    let mut sink = MemorySink::new(&meter, len, d);
    run_tose(
        &params,
        &mut src,
        &mut sink,
        &BlockPlan::new(len, cfg.block)?,
        &ToseOptions::default(),
        &meter,
    )?;
    let oracle = unrolled_jvp(&params.cast::<f64>(), &u64_, &du64, &MemoryMeter::new())?;
    Ok(relative_error(&sink.dy, &oracle.dy))
}

pub fn run<T: Scalar>(cfg: &Config, ctx: &RunContext, prec: Precision) -> anyhow::Result<Outcome> {
    let lengths = log_lengths(
        cfg.invariance_min_len,
        cfg.invariance_max_len,
        cfg.invariance_points,
    );
    let errs: Vec<f64> = lengths
        .par_iter()
        .enumerate()
        .map(|(i, &len)| error_at::<T>(cfg, len, ctx.seed + i as u64))
        .collect::<anyhow::Result<_>>()?;

    let mut csv = Csv::new("invariance.csv", &["L", "seed", "rel_err"]);
    for (i, (&len, &e)) in lengths.iter().zip(&errs).enumerate() {
        csv.row(&[&len, &(ctx.seed + i as u64), &Sci(e)]);
    }
    let xs: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let fit = ols_slope_test(&xs, &errs)?;

    let mut breaches = Vec::new();
    if lengths.len() < 30 {
        breaches.push(format!("only {} distinct lengths", lengths.len()));
    }
    if !(fit.p_value > cfg.invariance_alpha) {
        breaches.push(format!(
            "slope {:e} is significant: p = {:e} <= {}",
            fit.slope, fit.p_value, cfg.invariance_alpha
        ));
    }
    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    w.json("invariance_fit.json", &fit, true)?;
    let summary = serde_json::json!({
        "lengths": lengths.len(),
        "slope": fit.slope,
        "p_value": fit.p_value,
        "alpha": cfg.invariance_alpha,
        "max_rel_err": errs.iter().copied().fold(0.0, f64::max),
    });
    w.finish("invariance", cfg, prec, breaches.is_empty(), breaches, summary, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lengths_are_distinct_and_span_the_range() {
        let l = log_lengths(100, 100_000, 30);
        assert_eq!(l.len(), 30);
        assert_eq!((l[0], l[29]), (100, 100_000));
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }
}
