//! Second-order flow: exact Hessian-vector products along input directions
//! `v` and `w`.
//!
//! Each lane carries `(h, ∇_v h, ∇_w h, ∇²h)`. With `s = sigmoid(z)` for the
//! step-size argument `z`, the second variations of the discretization are
//!
//! ```text
//! ∇²Δ = s(1-s) w_Δ² v w
//! ∇²Ā = Ā A² ∇_vΔ ∇_wΔ + Ā A ∇²Δ
//! ∇²x = ∇_vB w + ∇_wB v            (B is linear in u)
//! ∇²b̄ = ∇²c x + ∇_v c ∇_w x + ∇_w c ∇_v x + c ∇²x
//! ```
//!
//! and the state follows `∇²h_t = Ā_t ∇²h_{t-1} + H_t` with
//! `H_t = ∇_wĀ ∇_v h_{t-1} + ∇_vĀ ∇_w h_{t-1} + ∇²Ā h_{t-1} + ∇²b̄`.
//! The output adds the activation curvature:
//! `∇²y = σ''(ŷ) ∇_vŷ ∇_wŷ + σ'(ŷ) Σ_n C ∇²h`.

use crate::error::{check_finite, check_len, PgfError, Result};
use crate::glr::{Discretization, GlrParams};
use crate::meter::{MemClass, MemoryMeter};
use crate::scalar::{first_non_finite, sigmoid, softplus, Scalar};
use crate::tose::BlockPlan;

/// Primal, both first-order tangents and the second-order state, `[D, N]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleState<T> {
    pub d: usize,
    pub n: usize,
    pub h: Vec<T>,
    pub dh_v: Vec<T>,
    pub dh_w: Vec<T>,
    pub d2h: Vec<T>,
}

impl<T: Scalar> TripleState<T> {
    pub fn zeros(d: usize, n: usize) -> Self {
        let z = vec![T::zero(); d * n];
        TripleState {
            d,
            n,
            h: z.clone(),
            dh_v: z.clone(),
            dh_w: z.clone(),
            d2h: z,
        }
    }

    pub fn bytes(&self) -> usize {
        4 * self.d * self.n * T::bytes()
    }

    pub fn is_finite(&self) -> bool {
        [&self.h, &self.dh_v, &self.dh_w, &self.d2h]
            .iter()
            .all(|x| first_non_finite(x).is_none())
    }
}

/// Step-local derivative data for one lane.
#[derive(Debug, Clone, Copy, Default)]
struct LaneStep<T> {
    a_bar: T,
    dv_a: T,
    dw_a: T,
    d2_a: T,
    b_bar: T,
    dv_b: T,
    dw_b: T,
    d2_b: T,
}

/// Per-step scratch for projected inputs.
#[derive(Debug, Default)]
struct Proj<T> {
    b: Vec<T>,
    bv: Vec<T>,
    bw: Vec<T>,
}

impl<T: Scalar> Proj<T> {
    fn fill(&mut self, params: &GlrParams<T>, u: &[T], v: &[T], w: &[T]) {
        params.selective_b(u, &mut self.b);
        params.selective_b(v, &mut self.bv);
        params.selective_b(w, &mut self.bw);
    }
}

fn lane_step<T: Scalar>(
    params: &GlrParams<T>,
    proj: &Proj<T>,
    d: usize,
    n: usize,
    u: T,
    v: T,
    w: T,
) -> LaneStep<T> {
    let lane = d * params.n + n;
    let a = params.a(lane);
    let wd = params.delta_weight[d];
    let z = params.delta_arg(d, u);
    let s = sigmoid(z);
    let delta = softplus(z);
    let dv_delta = s * wd * v;
    let dw_delta = s * wd * w;
    let d2_delta = s * (T::one() - s) * wd * wd * v * w;

    let a_bar = (delta * a).exp();
    let dv_a = a_bar * a * dv_delta;
    let dw_a = a_bar * a * dw_delta;
    let d2_a = a_bar * a * a * dv_delta * dw_delta + a_bar * a * d2_delta;

    let sel = |xs: &[T]| -> T {
        if xs.is_empty() {
            T::zero()
        } else {
            xs[n]
        }
    };
    let b = params.b_lane(&proj.b, d, n);
    let (bv, bw) = (sel(&proj.bv), sel(&proj.bw));
    let x = b * u;
    let dv_x = bv * u + b * v;
    let dw_x = bw * u + b * w;
    let d2_x = bv * w + bw * v;

    let (c, dv_c, dw_c, d2_c) = match params.discretization {
        Discretization::Euler => (delta, dv_delta, dw_delta, d2_delta),
        Discretization::Zoh => (
            (delta * a).exp_m1() / a,
            a_bar * dv_delta,
            a_bar * dw_delta,
            a_bar * a * dv_delta * dw_delta + a_bar * d2_delta,
        ),
    };
    LaneStep {
        a_bar,
        dv_a,
        dw_a,
        d2_a,
        b_bar: c * x,
        dv_b: dv_c * x + c * dv_x,
        dw_b: dw_c * x + c * dw_x,
        d2_b: d2_c * x + dv_c * dw_x + dw_c * dv_x + c * d2_x,
    }
}

#[inline]
fn source_of<T: Scalar>(ls: &LaneStep<T>, h: T, dhv: T, dhw: T) -> T {
    ls.dw_a * dhv + ls.dv_a * dhw + ls.d2_a * h + ls.d2_b
}

/// The second-order source `H_t` for one step given the previous state.
pub fn hessian_source<T: Scalar>(
    params: &GlrParams<T>,
    u_t: &[T],
    v_t: &[T],
    w_t: &[T],
    prev: &TripleState<T>,
) -> Vec<T> {
    let mut proj = Proj::default();
    proj.fill(params, u_t, v_t, w_t);
    let mut out = vec![T::zero(); params.lanes()];
    for d in 0..params.d {
        for n in 0..params.n {
            let lane = d * params.n + n;
            let ls = lane_step(params, &proj, d, n, u_t[d], v_t[d], w_t[d]);
            out[lane] = source_of(&ls, prev.h[lane], prev.dh_v[lane], prev.dh_w[lane]);
        }
    }
    out
}

fn triple_step<T: Scalar>(
    params: &GlrParams<T>,
    proj: &mut Proj<T>,
    u_t: &[T],
    v_t: &[T],
    w_t: &[T],
    st: &mut TripleState<T>,
) {
    proj.fill(params, u_t, v_t, w_t);
    for d in 0..params.d {
        for n in 0..params.n {
            let lane = d * params.n + n;
            let ls = lane_step(params, proj, d, n, u_t[d], v_t[d], w_t[d]);
            let (h, hv, hw) = (st.h[lane], st.dh_v[lane], st.dh_w[lane]);
            st.d2h[lane] = ls.a_bar * st.d2h[lane] + source_of(&ls, h, hv, hw);
            st.dh_v[lane] = ls.dv_a * h + ls.a_bar * hv + ls.dv_b;
            st.dh_w[lane] = ls.dw_a * h + ls.a_bar * hw + ls.dw_b;
            st.h[lane] = ls.a_bar * h + ls.b_bar;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvpOutput<T> {
    pub y: Vec<T>,
    pub dy_v: Vec<T>,
    pub dy_w: Vec<T>,
    /// `[L, D]` second variation `∇²_{v,w} y`.
    pub d2y: Vec<T>,
    pub final_state: TripleState<T>,
}

/// Streams the triple recurrence block by block and returns every output.
pub fn pgf_hvp<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    v: &[T],
    w: &[T],
    plan: &BlockPlan,
    meter: &MemoryMeter,
) -> Result<HvpOutput<T>> {
    params.validate()?;
    let (d, nn) = (params.d, params.n);
    check_len("u (L x D)", plan.len * d, u.len())?;
    check_len("v", u.len(), v.len())?;
    check_len("w", u.len(), w.len())?;
    check_finite("u", u)?;
    check_finite("v", v)?;
    check_finite("w", w)?;

    let io = MemClass::Io;
    let g = MemClass::Graph;
    let mut y = meter.alloc(io, u.len(), T::zero());
    let mut dy_v = meter.alloc(io, u.len(), T::zero());
    let mut dy_w = meter.alloc(io, u.len(), T::zero());
    let mut d2y = meter.alloc(io, u.len(), T::zero());
    let mut st = TripleState::zeros(d, nn);
    meter.track(g, st.bytes())?;

    let run = (|| -> Result<()> {
        for (k, range) in plan.ranges().enumerate() {
            let span = range.start * d..range.end * d;
            let mut blk = meter.alloc(g, 3 * span.len(), T::zero());
            let m = span.len();
            blk[..m].copy_from_slice(&u[span.clone()]);
            blk[m..2 * m].copy_from_slice(&v[span.clone()]);
            blk[2 * m..].copy_from_slice(&w[span.clone()]);
            let mut proj = Proj {
                b: Vec::with_capacity(nn),
                bv: Vec::with_capacity(nn),
                bw: Vec::with_capacity(nn),
            };
            let proj_bytes = 3 * nn * T::bytes();
            meter.track(g, proj_bytes)?;
            for i in 0..range.len() {
                let row = i * d..(i + 1) * d;
                let (u_t, v_t, w_t) = (&blk[row.clone()], &blk[m..][row.clone()], &blk[2 * m..][row]);
                triple_step(params, &mut proj, u_t, v_t, w_t, &mut st);
                let t = range.start + i;
                for dd in 0..d {
                    let lanes = dd * nn..(dd + 1) * nn;
                    let c = &params.c_weight[lanes.clone()];
                    let dot = |x: &[T]| -> T { c.iter().zip(x).map(|(&a, &b)| a * b).sum() };
                    let yh = dot(&st.h[lanes.clone()]) + params.d_res[dd] * u_t[dd];
                    let yv = dot(&st.dh_v[lanes.clone()]) + params.d_res[dd] * v_t[dd];
                    let yw = dot(&st.dh_w[lanes.clone()]) + params.d_res[dd] * w_t[dd];
                    let y2 = dot(&st.d2h[lanes]);
                    let act = params.activation;
                    let (s1, s2) = (act.deriv(yh), act.second_deriv(yh));
                    let o = t * d + dd;
                    y[o] = act.eval(yh);
                    dy_v[o] = s1 * yv + T::zero();
                    dy_w[o] = s1 * yw + T::zero();
                    d2y[o] = s2 * yv * yw + s1 * y2 + T::zero();
                }
            }
            meter.release(g, proj_bytes)?;
            if !st.is_finite() {
                return Err(PgfError::NonFiniteState {
                    block: k,
                    step: range.end - 1,
                });
            }
        }
        Ok(())
    })();
    meter.release(g, st.bytes())?;
    run?;
    Ok(HvpOutput {
        y: y.to_vec(),
        dy_v: dy_v.to_vec(),
        dy_w: dy_w.to_vec(),
        d2y: d2y.to_vec(),
        final_state: st,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glr::{Activation, InputMode};
    use crate::numerics::relative_error;
    use crate::sample::normal_vec;
    use crate::tangent::{pgf_jvp_dense, ScanStrategy};

    fn hvp(p: &GlrParams<f64>, u: &[f64], v: &[f64], w: &[f64], block: usize) -> HvpOutput<f64> {
        let plan = BlockPlan::new(u.len() / p.d, block).unwrap();
        pgf_hvp(p, u, v, w, &plan, &MemoryMeter::new()).unwrap()
    }

    fn inputs(len: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            normal_vec(40, 1, len * d),
            normal_vec(40, 2, len * d),
            normal_vec(40, 3, len * d),
        )
    }

    #[test]
    fn first_order_parts_match_tangent_flow() {
        let p = GlrParams::<f64>::random(2, 3, 2).with_activation(Activation::Silu);
        let (u, v, w) = inputs(60, 2);
        let out = hvp(&p, &u, &v, &w, 16);
        let jv = pgf_jvp_dense(&p, &u, &v, None, ScanStrategy::Sequential).unwrap();
        assert!(relative_error(&out.dy_v, &jv.dy) <= 1e-13);
        assert!(relative_error(&out.y, &jv.y) <= 1e-14);
    }

    #[test]
    fn matches_fd_of_jvp() {
        for disc in [Discretization::Zoh, Discretization::Euler] {
            for mode in [InputMode::Selective, InputMode::Fixed] {
                for act in [Activation::Identity, Activation::Silu] {
                    let p = GlrParams::<f64>::random(2, 3, 6)
                        .with_discretization(disc)
                        .with_input_mode(mode)
                        .with_activation(act);
                    let (u, v, w) = inputs(80, 2);
                    let out = hvp(&p, &u, &v, &w, 32);
                    let eps = 1e-5;
                    let shift = |s: f64| -> Vec<f64> {
                        u.iter().zip(&w).map(|(a, b)| a + s * eps * b).collect()
                    };
                    let plus = pgf_jvp_dense(&p, &shift(1.0), &v, None, ScanStrategy::Sequential);
                    let minus = pgf_jvp_dense(&p, &shift(-1.0), &v, None, ScanStrategy::Sequential);
                    let fd: Vec<f64> = plus
                        .unwrap()
                        .dy
                        .iter()
                        .zip(&minus.unwrap().dy)
                        .map(|(a, b)| (a - b) / (2.0 * eps))
                        .collect();
                    let err = relative_error(&out.d2y, &fd);
                    assert!(err <= 1e-6, "{disc:?} {mode:?} {act:?}: {err:e}");
                }
            }
        }
    }

    #[test]
    fn symmetric_in_directions() {
        let p = GlrParams::<f64>::random(3, 4, 9).with_activation(Activation::Silu);
        let (u, v, w) = inputs(100, 3);
        let a = hvp(&p, &u, &v, &w, 16);
        let b = hvp(&p, &u, &w, &v, 16);
        assert!(relative_error(&a.d2y, &b.d2y) <= 1e-12);
    }

    #[test]
    fn zero_direction_and_linear_case() {
        let p = GlrParams::<f64>::random(2, 3, 4);
        let (u, v, _) = inputs(30, 2);
        let zero = vec![0.0; u.len()];
        assert!(hvp(&p, &u, &v, &zero, 8).d2y.iter().all(|&x| x == 0.0));
        let lin = p.clone().non_selective();
        let (_, _, w) = inputs(30, 2);
        assert!(hvp(&lin, &u, &v, &w, 8).d2y.iter().all(|&x| x == 0.0));
        let src = hessian_source(&lin, &u[..2], &v[..2], &w[..2], &TripleState::zeros(2, 3));
        assert!(src.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bilinear_for_identity_activation() {
        let p = GlrParams::<f64>::random(2, 3, 4);
        let (u, v, w) = inputs(40, 2);
        let base = hvp(&p, &u, &v, &w, 10);
        let v2: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let w2: Vec<f64> = w.iter().map(|x| -0.5 * x).collect();
        let scaled = hvp(&p, &u, &v2, &w2, 10);
        let want: Vec<f64> = base.d2y.iter().map(|x| -1.5 * x).collect();
        assert!(relative_error(&scaled.d2y, &want) <= 1e-13);
    }

    #[test]
    fn block_invariant_and_memory_flat() {
        let p = GlrParams::<f64>::random(2, 3, 4).with_activation(Activation::Silu);
        let (u, v, w) = inputs(64, 2);
        assert_eq!(hvp(&p, &u, &v, &w, 64), hvp(&p, &u, &v, &w, 5));
        let peak = |len: usize| {
            let (u, v, w) = inputs(len, 2);
            let meter = MemoryMeter::new();
            pgf_hvp(&p, &u, &v, &w, &BlockPlan::new(len, 16).unwrap(), &meter).unwrap();
            assert!(meter.is_balanced());
            meter.peak(MemClass::Graph)
        };
        assert_eq!(peak(160), peak(320));
    }
}
