//! A single impulse in the input direction, streamed over a long sequence.

use pgf_core::tose::{FnSink, GeneratedSource, ToseOptions};
use pgf_core::{run_tose, BlockPlan, MemoryMeter, Scalar};

use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

pub fn run<T: Scalar>(cfg: &Config, ctx: &RunContext, prec: Precision) -> anyhow::Result<Outcome> {
    let (len, t0, ch) = (cfg.ghost_len, cfg.ghost_t0, cfg.ghost_channel);
    let (d, n) = (cfg.ghost_d, cfg.ghost_n);
    anyhow::ensure!(t0 < len, "ghost_t0 = {t0} must be below ghost_len = {len}");
    anyhow::ensure!(ch < d, "ghost_channel = {ch} must be below ghost_d = {d}");
    let params = cfg.params::<T>(d, n, ctx.seed);
    let eps = T::lit(cfg.ghost_eps);

    let mut src = GeneratedSource::new(d, len, ctx.seed, |t: usize, out: &mut [T]| {
        out.fill(T::zero());
        if t == t0 {
            out[ch] = eps;
        }
    });
    let mut norms = vec![0.0f64; len];
    // steps before the pulse whose tangent is not bitwise +0
    let mut leaks: Vec<usize> = Vec::new();
    let mut sink = FnSink(|start: usize, _y: &[T], dy: &[T]| {
        for (i, row) in dy.chunks_exact(d).enumerate() {
            let t = start + i;
            if t < t0 && row.iter().any(|v| v.as_f64().to_bits() != 0) {
                leaks.push(t);
            }
            norms[t] = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        }
        Ok(())
    });
    let meter = MemoryMeter::new();
    let (_, stats) = run_tose(
        &params,
        &mut src,
        &mut sink,
        &BlockPlan::new(len, cfg.block)?,
        &ToseOptions::default(),
        &meter,
    )?;

    let max_after = norms[t0..].iter().copied().fold(0.0, f64::max);
    let mut csv = Csv::new("ghost_pulse.csv", &["t", "dy_norm"]);
    for (t, v) in norms.iter().enumerate() {
        csv.row(&[&t, &Sci(*v)]);
    }
    let mut breaches = Vec::new();
    if let Some(&t) = leaks.first() {
        breaches.push(format!("{} nonzero tangents before t0, first at t={t}", leaks.len()));
    }
    if !(max_after > 0.0) {
        breaches.push(format!("no response after t0: max |dy| = {max_after:e}"));
    }
    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    let summary = serde_json::json!({
        "L": len,
        "t0": t0,
        "eps": cfg.ghost_eps,
        "leaks_before_t0": leaks.len(),
        "max_dy_norm_after_t0": max_after,
        "dy_norm_at_t0": norms[t0],
        "peak_graph_bytes": stats.peak_graph_bytes,
    });
    w.finish("ghost_pulse", cfg, prec, breaches.is_empty(), breaches, summary, true)
}
