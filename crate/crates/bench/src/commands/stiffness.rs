//! Strong damping: single-precision log-shifted evolution against a double
//! oracle, plus the naive cumulative product for contrast.

use pgf_core::glr::output_map;
use pgf_core::numerics::{cumulative_product, log_shift_scan, log_step_operator, relative_error};
use pgf_core::oracle::unrolled_jvp;
use pgf_core::scalar::softplus_inv;
use pgf_core::tangent::tangent_output;
use pgf_core::{DualState, GlrParams, MemoryMeter};
use serde::Serialize;

use super::{gaussian_pair, widen};
use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Point {
    pub stiffness: f64,
    pub rel_err: f64,
    pub naive_underflowed: bool,
    pub underflow_events: usize,
}

/// Evenly spaced `Δ·A` values from `lo` to `hi`.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Parameters whose step decay rate `Δ·A` sits at `s` (up to a small
/// input-driven wobble in `Δ`).
pub fn stiff_params(cfg: &Config, s: f64, seed: u64) -> GlrParams<f64> {
    let mut p = cfg.params::<f64>(cfg.stiffness_d, cfg.stiffness_n, seed);
    p.a_log.iter_mut().for_each(|a| *a = (-s).ln());
    p.delta_bias.iter_mut().for_each(|b| *b = softplus_inv(1.0));
    p.delta_weight.iter_mut().for_each(|w| *w = 0.05 * w.signum());
    p
}

pub fn point(cfg: &Config, s: f64, seed: u64) -> anyhow::Result<Point> {
    let (d, len) = (cfg.stiffness_d, cfg.stiffness_len);
    let p32 = stiff_params(cfg, s, seed).cast::<f32>();
    let (u, du) = gaussian_pair::<f32>(seed, len, d);

    let ops = log_step_operator(&p32, &u, &du)?;
    let traj = log_shift_scan(&ops, &DualState::zeros(d, p32.n), cfg.stiffness_block)?;
    let w = d * p32.n;
    let mut dy = Vec::with_capacity(len * d);
    for t in 0..len {
        let u_t = &u[t * d..(t + 1) * d];
        let (_, y_hat) = output_map(&p32, &traj.h[t * w..(t + 1) * w], u_t);
        dy.extend(tangent_output(&p32, &traj.dh[t * w..(t + 1) * w], &du[t * d..(t + 1) * d], &y_hat));
    }

    let oracle = unrolled_jvp(&p32.cast::<f64>(), &widen(&u), &widen(&du), &MemoryMeter::new())?;

    // naive running product of the per-step decay on every lane
    let naive_underflowed = (0..w).any(|lane| {
        let decays: Vec<f32> = (0..len)
            .map(|t| ops.lanes[t * w + lane].log_magnitude.exp())
            .collect();
        cumulative_product(&decays).last() == Some(&0.0)
    });
    Ok(Point {
        stiffness: s,
        rel_err: relative_error(&dy, &oracle.dy),
        naive_underflowed,
        underflow_events: traj.underflow_events,
    })
}

pub fn run(cfg: &Config, ctx: &RunContext) -> anyhow::Result<Outcome> {
    let points: Vec<Point> = grid(cfg.stiffness_min, cfg.stiffness_max, cfg.stiffness_points)
        .into_iter()
        .map(|s| point(cfg, s, ctx.seed))
        .collect::<anyhow::Result<_>>()?;
    let mut csv = Csv::new("stiffness.csv", &["stiffness", "rel_err", "naive_underflowed"]);
    let mut breaches = Vec::new();
    for p in &points {
        csv.row(&[&Sci(p.stiffness), &Sci(p.rel_err), &p.naive_underflowed]);
        if !(p.rel_err < cfg.stiffness_tol) {
            breaches.push(format!("stiffness={} rel_err={:e}", p.stiffness, p.rel_err));
        }
    }
    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    let summary = serde_json::json!({
        "points": points,
        "max_rel_err": points.iter().map(|p| p.rel_err).fold(0.0, f64::max),
        "tol": cfg.stiffness_tol,
        "naive_underflow_at_stiff_end": points.first().map(|p| p.naive_underflowed),
    });
    w.finish("stiffness", cfg, Precision::F32, breaches.is_empty(), breaches, summary, true)
}
