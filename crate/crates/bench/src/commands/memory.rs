//! Metered peak bytes against sequence length for the streamed engine and
//! the unrolled oracle.

use pgf_core::meter::slope_report;
use pgf_core::numerics::RegressionReport;
use pgf_core::oracle::unrolled_jvp;
use pgf_core::tose::{
    generated_direction_row, DiscardSink, GeneratedSource, MemorySink, MemorySource, ToseOptions,
};
use pgf_core::{run_tose, BlockPlan, MemClass, MemoryMeter, Scalar};
use serde::Serialize;

use super::gaussian_pair;
use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PgfDiscard,
    PgfMemoryIo,
    Unrolled,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::PgfDiscard => "pgf_discard",
            Strategy::PgfMemoryIo => "pgf_memory_io",
            Strategy::Unrolled => "unrolled",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Peak {
    pub strategy: Strategy,
    pub len: usize,
    pub graph: usize,
    pub io: usize,
    pub total: usize,
}

fn peak_of(strategy: Strategy, len: usize, meter: &MemoryMeter) -> Peak {
    let s = meter.snapshot();
    Peak {
        strategy,
        len,
        graph: s.peak_graph,
        io: s.peak_io,
        total: s.peak_total,
    }
}

pub fn measure<T: Scalar>(
    cfg: &Config,
    strategy: Strategy,
    len: usize,
    seed: u64,
    meter: &MemoryMeter,
) -> anyhow::Result<Peak> {
    let (d, n) = (cfg.memory_d, cfg.memory_n);
    let params = cfg.params::<T>(d, n, seed);
    let plan = BlockPlan::new(len, cfg.block)?;
    let opts = ToseOptions::default();
    match strategy {
        Strategy::PgfDiscard => {
            let mut src = GeneratedSource::new(d, len, seed, |t: usize, out: &mut [T]| {
                generated_direction_row(seed, t, out)
            });
            run_tose(&params, &mut src, &mut DiscardSink, &plan, &opts, meter)?;
        }
        Strategy::PgfMemoryIo => {
            let (u, du) = gaussian_pair::<T>(seed, len, d);
            let mut src = MemorySource::new(meter, d, u, du)?;
            let mut sink = MemorySink::new(meter, len, d);
            run_tose(&params, &mut src, &mut sink, &plan, &opts, meter)?;
        }
        Strategy::Unrolled => {
            let (u, du) = gaussian_pair::<T>(seed, len, d);
            unrolled_jvp(&params, &u, &du, meter)?;
        }
    }
    anyhow::ensure!(meter.live(MemClass::Graph) == 0, "graph bytes still live after {}", strategy.name());
    Ok(peak_of(strategy, len, meter))
}

/// Graph bytes per step the unrolled oracle is expected to retain.
pub fn unrolled_bytes_per_step<T: Scalar>(d: usize, n: usize) -> usize {
    (3 * d * n + 2 * d * n * d) * T::bytes()
}

pub fn run<T: Scalar>(cfg: &Config, ctx: &RunContext, prec: Precision) -> anyhow::Result<Outcome> {
    let mut peaks = Vec::new();
    let mut events = None;
    for (i, &len) in cfg.memory_lengths.iter().enumerate() {
        let meter = if i == 0 { MemoryMeter::with_event_log() } else { MemoryMeter::new() };
        peaks.push(measure::<T>(cfg, Strategy::PgfDiscard, len, ctx.seed, &meter)?);
        if i == 0 {
            events = Some(meter.events_csv());
        }
        peaks.push(measure::<T>(cfg, Strategy::PgfMemoryIo, len, ctx.seed, &MemoryMeter::new())?);
    }
    for &len in &cfg.memory_unrolled_lengths {
        peaks.push(measure::<T>(cfg, Strategy::Unrolled, len, ctx.seed, &MemoryMeter::new())?);
    }

    let mut csv = Csv::new("memory.csv", &["strategy", "L", "peak_graph", "peak_io", "peak_total"]);
    for p in &peaks {
        csv.row(&[&p.strategy.name(), &p.len, &p.graph, &p.io, &p.total]);
    }
    let mut slopes = Csv::new(
        "memory_slopes.csv",
        &["strategy", "slope_bytes_per_step", "intercept", "p_value", "n"],
    );
    let mut fits: Vec<(Strategy, Option<RegressionReport>)> = Vec::new();
    for s in [Strategy::PgfDiscard, Strategy::PgfMemoryIo, Strategy::Unrolled] {
        let runs: Vec<(usize, usize)> = peaks
            .iter()
            .filter(|p| p.strategy == s)
            .map(|p| (p.len, p.graph))
            .collect();
        let fit = slope_report(&runs).ok();
        if let Some(f) = &fit {
            slopes.row(&[&s.name(), &Sci(f.slope), &Sci(f.intercept), &Sci(f.p_value), &f.n]);
        }
        fits.push((s, fit));
    }

    let mut breaches = Vec::new();
    let discard: Vec<&Peak> = peaks.iter().filter(|p| p.strategy == Strategy::PgfDiscard).collect();
    if discard.windows(2).any(|w| w[0].graph != w[1].graph) {
        let all: Vec<String> = discard.iter().map(|p| format!("L={}:{}", p.len, p.graph)).collect();
        breaches.push(format!("pgf_discard graph peaks differ: {}", all.join(" ")));
    }
    let expected = unrolled_bytes_per_step::<T>(cfg.memory_d, cfg.memory_n) as f64;
    let unrolled_slope = fits
        .iter()
        .find(|(s, _)| *s == Strategy::Unrolled)
        .and_then(|(_, f)| f.as_ref().map(|f| f.slope));
    match unrolled_slope {
        Some(s) if (s - expected).abs() <= 1e-9 * expected => {}
        other => breaches.push(format!(
            "unrolled graph slope {other:?} bytes/step, expected {expected}"
        )),
    }

    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    w.csv(&slopes)?;
    if let Some(ev) = &events {
        w.text("meter_events.csv", ev)?;
    }
    let summary = serde_json::json!({
        "pgf_discard_graph_peaks": discard.iter().map(|p| p.graph).collect::<Vec<_>>(),
        "unrolled_slope_bytes_per_step": unrolled_slope,
        "unrolled_expected_bytes_per_step": expected,
        "fits": fits.iter().map(|(s, f)| serde_json::json!({"strategy": s, "fit": f})).collect::<Vec<_>>(),
    });
    w.finish("memory", cfg, prec, breaches.is_empty(), breaches, summary, true)
}
