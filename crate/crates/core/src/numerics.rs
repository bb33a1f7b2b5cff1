//! Log-shifted evolution for stiff decay, error metrics, and the slope test
//! used for length-invariance statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{check_len, PgfError, Result};
use crate::glr::{drive_coeff, drive_coeff_ddelta, GlrParams};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::scan::Monoid;
use crate::tangent::DualState;

/// Denominator floor of [`relative_error`].
pub const ERROR_FLOOR: f64 = 1e-30;

/// `‖x − y‖₂ / max(‖y‖₂, 1e-30)`, accumulated in `f64`. `y` is the reference.
pub fn relative_error<T: Scalar, U: Scalar>(x: &[T], y: &[U]) -> f64 {
    assert_eq!(x.len(), y.len(), "relative_error: length mismatch");
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a.as_f64(), b.as_f64());
        num += (a - b) * (a - b);
        den += b * b;
    }
    num.sqrt() / den.sqrt().max(ERROR_FLOOR)
}

/// Largest elementwise `|x − y| / max(|y|, floor)`.
pub fn max_rel_dev<T: Scalar>(x: &[T], y: &[T], floor: f64) -> f64 {
    assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs() / b.as_f64().abs().max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Exact Student-t CDF (`n <= 30`).
    StudentT,
    /// Normal approximation (`n > 30`).
    Normal,
    /// Zero residual variance; p is 0 or 1 by construction.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub t_stat: f64,
    /// Two-sided, for H0: slope = 0.
    pub p_value: f64,
    pub n: usize,
    pub method: PValueMethod,
}

/// Ordinary least squares of `ys` on `xs` with a two-sided slope test.
pub fn ols_slope_test(xs: &[f64], ys: &[f64]) -> Result<RegressionReport> {
    let n = xs.len();
    check_len("ols ys", n, ys.len())?;
    if n < 3 || xs.iter().all(|&x| x == xs[0]) {
        return Err(PgfError::DegenerateRegression(n));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    if ys.iter().all(|&y| y == ys[0]) {
        return Ok(RegressionReport {
            slope: 0.0,
            intercept: ys[0],
            stderr: 0.0,
            t_stat: 0.0,
            p_value: 1.0,
            n,
            method: PValueMethod::Degenerate,
        });
    }
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let df = nf - 2.0;
    let stderr = (sse / df / sxx).sqrt();
    if stderr == 0.0 {
        let p_value = if slope == 0.0 { 1.0 } else { 0.0 };
        let t_stat = if slope == 0.0 { 0.0 } else { slope.signum() * f64::INFINITY };
        return Ok(RegressionReport {
            slope,
            intercept,
            stderr,
            t_stat,
            p_value,
            n,
            method: PValueMethod::Degenerate,
        });
    }
    let t_stat = slope / stderr;
    let (p_value, method) = if n <= 30 {
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t_stat.abs()), PValueMethod::StudentT)
    } else {
        (erfc(t_stat.abs() / std::f64::consts::SQRT_2), PValueMethod::Normal)
    };
    Ok(RegressionReport {
        slope,
        intercept,
        stderr,
        t_stat,
        p_value: p_value.clamp(0.0, 1.0),
        n,
        method,
    })
}

/// Running product `Π_{s<=t} xs[s]` in working precision.
pub fn cumulative_product<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut acc = T::one();
    xs.iter()
        .map(|&x| {
            acc *= x;
            acc
        })
        .collect()
}

/// Augmented lane operator with its decay kept in log form.
///
/// Represents the same map as a `(a, k, b, j)` lane with
/// `a = exp(log_magnitude)` and `k = exp(log_magnitude) · log_tangent`;
/// composition adds logs and only ever multiplies by `exp(ℓ) <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogShiftedLane<T> {
    /// Natural log of the cumulative decay product.
    pub log_magnitude: T,
    /// Tangent of `log_magnitude`.
    pub log_tangent: T,
    pub b: T,
    pub j: T,
}

impl<T: Scalar> Monoid for LogShiftedLane<T> {
    fn identity() -> Self {
        LogShiftedLane {
            log_magnitude: T::zero(),
            log_tangent: T::zero(),
            b: T::zero(),
            j: T::zero(),
        }
    }

    #[inline]
    fn compose(m2: Self, m1: Self) -> Self {
        let scale = m2.log_magnitude.exp();
        LogShiftedLane {
            log_magnitude: m2.log_magnitude + m1.log_magnitude,
            log_tangent: m2.log_tangent + m1.log_tangent,
            b: scale * m1.b + m2.b,
            j: scale * (m2.log_tangent * m1.b + m1.j) + m2.j,
        }
    }
}

impl<T: Scalar> LogShiftedLane<T> {
    /// Reconstructed `(a, k)`.
    pub fn transition(&self) -> (T, T) {
        let a = self.log_magnitude.exp();
        (a, a * self.log_tangent)
    }

    #[inline]
    pub fn apply(&self, h: T, dh: T) -> (T, T) {
        let a = self.log_magnitude.exp();
        (a * h + self.b, a * (self.log_tangent * h + dh) + self.j)
    }
}

/// Per-step lane operators in log form: `log Ā = Δ·A` and its tangent `A·dΔ`
/// are produced directly, never as `ln(exp(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogStepOperator<T> {
    pub len: usize,
    pub d: usize,
    pub n: usize,
    pub lanes: Vec<LogShiftedLane<T>>,
}

pub fn log_step_operator<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    du: &[T],
) -> Result<LogStepOperator<T>> {
    params.validate()?;
    let (d, n) = (params.d, params.n);
    check_len("du", u.len(), du.len())?;
    if u.is_empty() || u.len() % d != 0 {
        return Err(PgfError::Shape {
            what: "u (L x D)",
            expected: d,
            got: u.len(),
        });
    }
    crate::error::check_finite("u", u)?;
    crate::error::check_finite("du", du)?;
    let len = u.len() / d;
    let mut lanes = Vec::with_capacity(len * d * n);
    let mut bsel = Vec::with_capacity(n);
    let mut dbsel = Vec::with_capacity(n);
    for t in 0..len {
        let (u_t, du_t) = (&u[t * d..(t + 1) * d], &du[t * d..(t + 1) * d]);
        params.selective_b(u_t, &mut bsel);
        params.selective_b(du_t, &mut dbsel);
        for ch in 0..d {
            let z = params.delta_arg(ch, u_t[ch]);
            let dt = softplus(z);
            let ddt = sigmoid(z) * params.delta_weight[ch] * du_t[ch];
            for st in 0..n {
                let lane = ch * n + st;
                let a = params.a(lane);
                let bl = params.b_lane(&bsel, ch, st);
                let dbl = if bsel.is_empty() { T::zero() } else { dbsel[st] };
                let x = bl * u_t[ch];
                let dx = dbl * u_t[ch] + bl * du_t[ch];
                let a_bar = (dt * a).exp();
                let coeff = drive_coeff(params.discretization, dt, a);
                lanes.push(LogShiftedLane {
                    log_magnitude: dt * a,
                    log_tangent: a * ddt,
                    b: coeff * x,
                    j: drive_coeff_ddelta(params.discretization, a_bar) * ddt * x + coeff * dx,
                });
            }
        }
    }
    Ok(LogStepOperator { len, d, n, lanes })
}

/// Dual trajectory from [`log_shift_scan`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogShiftTrajectory<T> {
    /// `[L, D, N]`.
    pub h: Vec<T>,
    /// `[L, D, N]`.
    pub dh: Vec<T>,
    /// Steps at which a block-local decay `exp(ℓ)` underflowed to zero while
    /// `ℓ` itself stayed finite. Legitimate, reported rather than fatal.
    pub underflow_events: usize,
    /// Most negative block-local log product seen.
    pub min_block_log_product: f64,
    /// Lower bound `-B · max|Δ·A|` on the block-local log product.
    pub block_log_range_bound: f64,
}

/// Evolves the dual state with cumulative decays kept in log space.
///
/// The running shift is per lane and re-anchored at every `block` boundary:
/// inside a block each state is `exp(ℓ_t)·(boundary state) + accumulated
/// drive`, where `ℓ_t` is the block-local log product; at the boundary the
/// state is materialised and `ℓ` restarts at zero.
pub fn log_shift_scan<T: Scalar>(
    ops: &LogStepOperator<T>,
    dual0: &DualState<T>,
    block: usize,
) -> Result<LogShiftTrajectory<T>> {
    if block == 0 {
        return Err(PgfError::Invalid("block size must be >= 1".into()));
    }
    let w = ops.d * ops.n;
    check_len("dual0", w, dual0.h.len())?;
    check_len("log operators", ops.len * w, ops.lanes.len())?;
    let mut h = vec![T::zero(); ops.len * w];
    let mut dh = vec![T::zero(); ops.len * w];
    let max_rate = ops
        .lanes
        .iter()
        .map(|l| l.log_magnitude.as_f64().abs())
        .fold(0.0, f64::max);
    let mut traj_underflow = 0usize;
    let mut min_log = 0.0f64;
    let mut h_anchor = dual0.h.clone();
    let mut dh_anchor = dual0.dh.clone();
    let mut start = 0;
    while start < ops.len {
        let end = (start + block).min(ops.len);
        for lane in 0..w {
            let mut prefix = LogShiftedLane::identity();
            for t in start..end {
                prefix = LogShiftedLane::compose(ops.lanes[t * w + lane], prefix);
                let scale = prefix.log_magnitude.exp();
                if scale == T::zero() && prefix.log_magnitude.is_finite() {
                    traj_underflow += 1;
                }
                min_log = min_log.min(prefix.log_magnitude.as_f64());
                let (ht, dht) = prefix.apply(h_anchor[lane], dh_anchor[lane]);
                h[t * w + lane] = ht;
                dh[t * w + lane] = dht;
            }
            h_anchor[lane] = h[(end - 1) * w + lane];
            dh_anchor[lane] = dh[(end - 1) * w + lane];
        }
        start = end;
    }
    Ok(LogShiftTrajectory {
        h,
        dh,
        underflow_events: traj_underflow,
        min_block_log_product: min_log,
        block_log_range_bound: -(block as f64) * max_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::normal_vec;
    use crate::scan::{fold, inclusive_scan_seq};
    use rand::Rng;

    #[test]
    fn relative_error_cases() {
        let y = [0.6f64, 0.8];
        assert_eq!(relative_error(&y, &y), 0.0);
        assert_eq!(relative_error(&[0.0f64; 3], &[0.0f64; 3]), 0.0);
        let x: Vec<f64> = y.iter().map(|v| v * 1.000001).collect();
        assert!((relative_error(&x, &y) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let r = ols_slope_test(&xs, &ys).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12);
        assert!((r.intercept - 1.0).abs() < 1e-12);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn constant_response() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let r = ols_slope_test(&xs, &[0.3; 4]).unwrap();
        assert_eq!((r.slope, r.t_stat, r.p_value), (0.0, 0.0, 1.0));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(ols_slope_test(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(ols_slope_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(ols_slope_test(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn noise_has_no_slope() {
        let mut r = crate::sample::rng(2024, 0);
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ys: Vec<f64> = (0..100).map(|_| r.random::<f64>()).collect();
        let rep = ols_slope_test(&xs, &ys).unwrap();
        assert!(rep.p_value > 0.001, "{rep:?}");
        assert_eq!(rep.method, PValueMethod::Normal);
        assert!((rep.slope / rep.stderr - rep.t_stat).abs() < 1e-12);
    }

    #[test]
    fn small_sample_uses_student_t() {
        // t = 2.0 with 8 degrees of freedom: two-sided p = 0.08052...
        // (reference value from the t table / scipy.stats.t.sf(2, 8) * 2)
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut ys: Vec<f64> = vec![0.0; 10];
        ys[0] = 1.0;
        ys[9] = -1.0;
        let rep = ols_slope_test(&xs, &ys).unwrap();
        assert_eq!(rep.method, PValueMethod::StudentT);
        let dist = StudentsT::new(0.0, 1.0, 8.0).unwrap();
        let expect = 2.0 * dist.sf(rep.t_stat.abs());
        assert!((rep.p_value - expect).abs() < 1e-15);
        let p2 = 2.0 * dist.sf(2.0);
        assert!((p2 - 0.080516).abs() < 1e-5, "{p2}");
    }

    #[test]
    fn stiff_log_products_add() {
        let lane = LogShiftedLane {
            log_magnitude: -8.0f32,
            log_tangent: 0.0,
            b: 0.0,
            j: 0.0,
        };
        let total = fold(&vec![lane; 100]);
        assert_eq!(total.log_magnitude, -800.0);
        let naive = cumulative_product(&vec![(-8.0f32).exp(); 100]);
        assert_eq!(naive[99], 0.0);
        // unit decay: nothing changes
        let unit = LogShiftedLane {
            log_magnitude: 0.0f64,
            log_tangent: 0.0,
            b: 0.0,
            j: 0.0,
        };
        assert_eq!(fold(&vec![unit; 10]).transition(), (1.0, 0.0));
    }

    #[test]
    fn log_lane_matches_augmented_lane_algebra() {
        use crate::tangent::AugLane;
        let mut r = crate::sample::rng(5, 5);
        let mut logs = Vec::new();
        let mut augs = Vec::new();
        for _ in 0..12 {
            let l = LogShiftedLane {
                log_magnitude: -r.random::<f64>(),
                log_tangent: r.random::<f64>() - 0.5,
                b: r.random::<f64>() - 0.5,
                j: r.random::<f64>() - 0.5,
            };
            let (a, k) = l.transition();
            augs.push(AugLane { a, k, b: l.b, j: l.j });
            logs.push(l);
        }
        inclusive_scan_seq(&mut logs);
        inclusive_scan_seq(&mut augs);
        for (l, m) in logs.iter().zip(&augs) {
            let (a, k) = l.transition();
            for (x, y) in [(a, m.a), (k, m.k), (l.b, m.b), (l.j, m.j)] {
                assert!((x - y).abs() <= 1e-13 * y.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn log_shift_agrees_with_plain_in_safe_regime() {
        use crate::tangent::pgf_jvp_dense_states;
        let p = GlrParams::<f64>::random(2, 3, 21);
        let u = normal_vec::<f64>(1, 1, 300 * 2);
        let du = normal_vec::<f64>(1, 2, 300 * 2);
        let ops = log_step_operator(&p, &u, &du).unwrap();
        let (h_ref, dh_ref) = pgf_jvp_dense_states(&p, &u, &du).unwrap();
        for block in [1, 16, 300] {
            let tr = log_shift_scan(&ops, &DualState::zeros(2, 3), block).unwrap();
            assert_eq!(tr.underflow_events, 0);
            assert!(relative_error(&tr.h, &h_ref) < 1e-12);
            assert!(relative_error(&tr.dh, &dh_ref) < 1e-12);
            assert!(tr.min_block_log_product >= tr.block_log_range_bound);
        }
        assert!(log_shift_scan(&ops, &DualState::zeros(2, 3), 0).is_err());
    }
}
