//! Online parameter gradients against parameter-wise central differences.

use pgf_core::glr::forward;
use pgf_core::numerics::relative_error;
use pgf_core::param_grad::{accumulate_all, AdjointSignal, GradAccumulators, Loss};
use pgf_core::sample::normal_vec;
use pgf_core::{BlockPlan, GlrParams, MemoryMeter, Scalar};
use serde::Serialize;

use super::widen;
use crate::config::Config;
use crate::report::{Csv, Outcome, Precision, RunContext, Sci, Writer};

/// Denominator floor for the elementwise error column.
const ELEMENT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct Group {
    pub param: &'static str,
    pub analytic: Vec<f64>,
    pub fd: Vec<f64>,
    pub rel_err: f64,
}

fn loss_of(p: &GlrParams<f64>, u: &[f64], loss: Loss) -> anyhow::Result<f64> {
    Ok(loss.value(&forward(p, u)?))
}

fn fd_group(
    p: &GlrParams<f64>,
    u: &[f64],
    loss: Loss,
    eps: f64,
    field: fn(&mut GlrParams<f64>) -> &mut Vec<f64>,
) -> anyhow::Result<Vec<f64>> {
    let count = field(&mut p.clone()).len();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut q = p.clone();
        let x = field(&mut q)[i];
        let h = eps * x.abs().max(1.0);
        field(&mut q)[i] = x + h;
        let plus = loss_of(&q, u, loss)?;
        field(&mut q)[i] = x - h;
        let minus = loss_of(&q, u, loss)?;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn accumulate<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    loss: Loss,
    block: usize,
) -> anyhow::Result<GradAccumulators<T>> {
    let len = u.len() / params.d;
    Ok(accumulate_all(
        params,
        u,
        AdjointSignal::Loss(loss),
        &BlockPlan::new(len, block)?,
        &MemoryMeter::new(),
    )?)
}

/// Per-group comparisons for `c_weight`, `b_weight`, `a_log`, together with
/// the block-vs-whole accumulator deviation and the blocked accumulators.
pub type GroupReport<T> = (Vec<Group>, f64, GradAccumulators<T>);

pub fn groups<T: Scalar>(cfg: &Config, seed: u64) -> anyhow::Result<GroupReport<T>> {
    let (len, d, n) = (cfg.params_len, cfg.params_d, cfg.params_n);
    let params = cfg.params::<T>(d, n, seed);
    let u: Vec<T> = normal_vec::<f64>(seed, 1, len * d).into_iter().map(T::lit).collect();
    let loss = cfg.params_loss;
    let acc = accumulate(&params, &u, loss, cfg.params_block)?;
    let whole = accumulate(&params, &u, loss, len)?;

    let p64 = params.cast::<f64>();
    let u64_ = widen(&u);
    let eps = cfg.fd_eps;
    let analytic = [
        ("c_weight", widen(&acc.g_c), widen(&whole.g_c)),
        ("b_weight", widen(&acc.g_b), widen(&whole.g_b)),
        ("a_log", widen(&acc.g_a_log(&params)), widen(&whole.g_a_log(&params))),
    ];
    let fds = [
        fd_group(&p64, &u64_, loss, eps, |p| &mut p.c_weight)?,
        fd_group(&p64, &u64_, loss, eps, |p| &mut p.b_weight)?,
        fd_group(&p64, &u64_, loss, eps, |p| &mut p.a_log)?,
    ];
    let mut block_dev = 0.0f64;
    let mut out = Vec::new();
    for ((param, a, a_whole), fd) in analytic.into_iter().zip(fds) {
        block_dev = block_dev.max(relative_error(&a, &a_whole));
        out.push(Group {
            param,
            rel_err: relative_error(&a, &fd),
            analytic: a,
            fd,
        });
    }
    Ok((out, block_dev, acc))
}

pub fn run<T: Scalar>(cfg: &Config, ctx: &RunContext, prec: Precision) -> anyhow::Result<Outcome> {
    let (groups, block_dev, acc) = groups::<T>(cfg, ctx.seed)?;
    let mut csv = Csv::new("params.csv", &["param", "index", "analytic", "fd", "rel_err"]);
    let mut elementwise = Vec::new();
    let mut breaches = Vec::new();
    for g in &groups {
        for (i, (&a, &f)) in g.analytic.iter().zip(&g.fd).enumerate() {
            let e = (a - f).abs() / f.abs().max(ELEMENT_FLOOR);
            elementwise.push(e);
            csv.row(&[&g.param, &i, &Sci(a), &Sci(f), &Sci(e)]);
        }
        if !(g.rel_err <= cfg.params_tol) {
            breaches.push(format!("{}: rel_err={:e} > {:e}", g.param, g.rel_err, cfg.params_tol));
        }
    }
    if !(block_dev <= cfg.params_block_tol) {
        breaches.push(format!(
            "block {} vs whole-sequence accumulators differ by {:e}",
            cfg.params_block, block_dev
        ));
    }
    let mean = elementwise.iter().sum::<f64>() / elementwise.len().max(1) as f64;

    let mut w = Writer::new(ctx)?;
    w.csv(&csv)?;
    acc.write_files(&ctx.out)?;
    for name in ["g_c.bin", "g_b.bin", "g_a.bin"] {
        w.adopt(name)?;
        w.adopt(&format!("{name}.json"))?;
    }
    let summary = serde_json::json!({
        "loss": cfg.params_loss,
        "group_rel_err": groups.iter().map(|g| (g.param, g.rel_err)).collect::<std::collections::BTreeMap<_, _>>(),
        "mean_elementwise_rel_err": mean,
        "block_invariance_rel_err": block_dev,
        "tol": cfg.params_tol,
        "block_tol": cfg.params_block_tol,
    });
    w.finish("params", cfg, prec, breaches.is_empty(), breaches, summary, true)
}
