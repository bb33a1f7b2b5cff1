//! Reference implementations used to check the streaming paths.
//!
//! `unrolled_jvp` is written from scratch rather than on top of the tangent
//! module: it materializes the full per-step input Jacobians `∂Ā_t/∂u_t` and
//! `∂b̄_t/∂u_t` (lanes x D) and keeps every state, so its tracked graph memory
//! grows with `L`.

use std::hint::black_box;
use std::time::Instant;

use crate::error::{check_len, Result};
use crate::glr::{Discretization, GlrParams, InputMode};
use crate::meter::{MemClass, MemoryMeter};
use crate::sample::{normal_vec, rng};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tangent::ScanStrategy;
use crate::tose::{generated_input_row, run_tose, BlockPlan, DiscardSink, GeneratedSource, ToseOptions};

/// Central-difference step for base point `u`: `eps · max(1, max|u|)`.
pub fn fd_step<T: Scalar>(u: &[T], eps: f64) -> f64 {
    eps * u.iter().fold(1.0f64, |m, x| m.max(x.as_f64().abs()))
}

/// `(F(u + h v) - F(u - h v)) / 2h` with `h = fd_step(u, eps)`.
pub fn fd_jvp<T, F>(mut f: F, u: &[T], v: &[T], eps: f64) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    check_len("fd direction", u.len(), v.len())?;
    let h = fd_step(u, eps);
    let ht = T::lit(h);
    let plus: Vec<T> = u.iter().zip(v).map(|(&a, &b)| a + ht * b).collect();
    let minus: Vec<T> = u.iter().zip(v).map(|(&a, &b)| a - ht * b).collect();
    let fp = f(&plus)?;
    let fm = f(&minus)?;
    let inv = T::lit(0.5 / h);
    Ok(fp.iter().zip(&fm).map(|(&a, &b)| (a - b) * inv).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledOutput<T> {
    pub y: Vec<T>,
    pub dy: Vec<T>,
}

/// Chain-rule JVP that keeps the whole unrolled graph.
///
/// For every step it stores `h_t`, `Ā_t`, and the dense Jacobians
/// `JA_t[lane, d'] = ∂Ā_t[lane]/∂u_t[d']`, `Jb_t[lane, d'] = ∂b̄_t[lane]/∂u_t[d']`,
/// then propagates `∇h_t = Ā_t ∇h_{t-1} + (JA_t ∇u_t) h_{t-1} + Jb_t ∇u_t`.
pub fn unrolled_jvp<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    du: &[T],
    meter: &MemoryMeter,
) -> Result<UnrolledOutput<T>> {
    params.validate()?;
    let (dd, nn) = (params.d, params.n);
    let w = dd * nn;
    check_len("du", u.len(), du.len())?;
    let len = u.len() / dd;
    check_len("u (L x D)", len * dd, u.len())?;
    let g = MemClass::Graph;

    let mut hs = meter.alloc(g, (len + 1) * w, T::zero());
    let mut abar = meter.alloc(g, len * w, T::zero());
    let mut ja = meter.alloc(g, len * w * dd, T::zero());
    let mut jb = meter.alloc(g, len * w * dd, T::zero());
    let mut dhs = meter.alloc(g, (len + 1) * w, T::zero());

    // forward pass, recording every local Jacobian
    for t in 0..len {
        let ut = &u[t * dd..(t + 1) * dd];
        let bsel: Vec<T> = (0..nn)
            .map(|n| (0..dd).map(|q| params.b_weight[n * dd + q] * ut[q]).sum())
            .collect();
        for d in 0..dd {
            let z = params.delta_weight[d] * ut[d] + params.delta_bias[d];
            let delta = softplus(z);
            let ddelta_du = sigmoid(z) * params.delta_weight[d];
            for n in 0..nn {
                let lane = d * nn + n;
                let a = -params.a_log[lane].exp();
                let ab = (delta * a).exp();
                let (coeff, dcoeff) = match params.discretization {
                    Discretization::Euler => (delta, T::one()),
                    Discretization::Zoh => ((delta * a).exp_m1() / a, ab),
                };
                let bl = match params.input_mode {
                    InputMode::Selective => bsel[n],
                    InputMode::Fixed => params.b_weight[n * dd + d],
                };
                let x = bl * ut[d];
                let o = t * w + lane;
                abar[o] = ab;
                hs[(t + 1) * w + lane] = ab * hs[t * w + lane] + coeff * x;
                for q in 0..dd {
                    let dbl_dq = match params.input_mode {
                        InputMode::Selective => params.b_weight[n * dd + q],
                        InputMode::Fixed => T::zero(),
                    };
                    let own = if q == d { T::one() } else { T::zero() };
                    let ddelta = ddelta_du * own;
                    let dx = dbl_dq * ut[d] + bl * own;
                    ja[o * dd + q] = ab * a * ddelta;
                    jb[o * dd + q] = dcoeff * ddelta * x + coeff * dx;
                }
            }
        }
    }

    // tangent pass over the stored graph
    for t in 0..len {
        let dut = &du[t * dd..(t + 1) * dd];
        for lane in 0..w {
            let o = t * w + lane;
            let row = o * dd..(o + 1) * dd;
            let ka: T = ja[row.clone()].iter().zip(dut).map(|(&j, &v)| j * v).sum();
            let kb: T = jb[row].iter().zip(dut).map(|(&j, &v)| j * v).sum();
            dhs[(t + 1) * w + lane] =
                abar[o] * dhs[t * w + lane] + ka * hs[t * w + lane] + kb;
        }
    }

    let mut y = vec![T::zero(); len * dd];
    let mut dy = vec![T::zero(); len * dd];
    for t in 0..len {
        let h = &hs[(t + 1) * w..(t + 2) * w];
        let dh = &dhs[(t + 1) * w..(t + 2) * w];
        for d in 0..dd {
            let mut yh = params.d_res[d] * u[t * dd + d];
            let mut dyh = params.d_res[d] * du[t * dd + d];
            for n in 0..nn {
                yh += params.c_weight[d * nn + n] * h[d * nn + n];
                dyh += params.c_weight[d * nn + n] * dh[d * nn + n];
            }
            let (val, slope) = match params.activation {
                crate::glr::Activation::Identity => (yh, T::one()),
                crate::glr::Activation::Silu => {
                    let s = sigmoid(yh);
                    (yh * s, s + yh * s * (T::one() - s))
                }
            };
            y[t * dd + d] = val;
            dy[t * dd + d] = slope * dyh;
        }
    }
    Ok(UnrolledOutput { y, dy })
}

/// Second-order oracle: central difference of the unrolled `v`-JVP along `w`.
pub fn fd_hvp<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    v: &[T],
    w: &[T],
    eps: f64,
) -> Result<Vec<T>> {
    let meter = MemoryMeter::new();
    fd_jvp(
        |x| Ok(unrolled_jvp(params, x, v, &meter)?.dy),
        u,
        w,
        eps,
    )
}

/// Seconds for `len` steps of dense sensitivity propagation with an `n x n`
/// transition: `h_t = W h_{t-1} + u_t`, `S_t = W S_{t-1} + diag(h_{t-1})`,
/// where `S = ∂h/∂(diagonal of W)` is tracked densely. Each step is an
/// `n x n` by `n x n` product, so cost per step is `Θ(n³)`.
pub fn dense_rtrl_time(n: usize, len: usize, seed: u64) -> f64 {
    let scale = 0.5 / (n as f64).sqrt();
    let wm: Vec<f64> = normal_vec::<f64>(seed, 201, n * n)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    let mut r = rng(seed, 202);
    let inputs: Vec<f64> = (0..len * n)
        .map(|_| rand::Rng::random_range(&mut r, -1.0..1.0))
        .collect();
    let mut h = vec![0.0f64; n];
    let mut hn = vec![0.0f64; n];
    let mut s = vec![0.0f64; n * n];
    let mut sn = vec![0.0f64; n * n];

    let started = Instant::now();
    for t in 0..len {
        sn.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let wrow = &wm[i * n..(i + 1) * n];
            let out = &mut sn[i * n..(i + 1) * n];
            for (k, &wik) in wrow.iter().enumerate() {
                let srow = &s[k * n..(k + 1) * n];
                for (o, &skj) in out.iter_mut().zip(srow) {
                    *o += wik * skj;
                }
            }
            out[i] += h[i];
            hn[i] = wrow.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + inputs[t * n + i];
        }
        std::mem::swap(&mut s, &mut sn);
        std::mem::swap(&mut h, &mut hn);
        black_box(&s);
    }
    let secs = started.elapsed().as_secs_f64();
    black_box(s.iter().sum::<f64>());
    secs
}

/// Seconds for a streamed first-order pass with `N = n` at fixed `D`.
pub fn pgf_time(d: usize, n: usize, len: usize, block: usize, seed: u64) -> Result<f64> {
    let params = GlrParams::<f64>::random(d, n, seed);
    let plan = BlockPlan::new(len, block)?;
    let meter = MemoryMeter::new();
    let mut src = GeneratedSource::new(d, len, seed, |t: usize, out: &mut [f64]| {
        generated_input_row(seed ^ 0x5eed, t, out)
    });
    let opts = ToseOptions {
        strategy: ScanStrategy::Sequential,
        h0: None,
    };
    let started = Instant::now();
    let (state, _) = run_tose(&params, &mut src, &mut DiscardSink, &plan, &opts, &meter)?;
    let secs = started.elapsed().as_secs_f64();
    black_box(state);
    Ok(secs)
}
