//! Online parameter gradients.
//!
//! A single forward pass carries the primal state together with the
//! parameter sensitivities `Γ^A = ∂h/∂A` and `Γ^B = ∂h/∂b_weight`, and folds
//! each step's contribution into the gradient accumulators as soon as the
//! adjoint for that step is known. Nothing indexed by time is retained.
//!
//! Sensitivities (per lane, `x = B u`, `c` the drive coefficient):
//! - `Γ^A_t = Ā_t Γ^A_{t-1} + Δ_t Ā_t h_{t-1} + ∂b̄_t/∂A`, where `∂b̄/∂A` is 0
//!   for Euler and `Δ² φ'(ΔA) x` for ZOH with `φ(z) = expm1(z)/z`
//! - fixed input: `Γ^B_t = Ā_t Γ^B_{t-1} + c_t u_t[d]`
//! - selective input, one slot per `(d, n, d')`:
//!   `Γ_t = Ā_t Γ_{t-1} + c_t u_t[d] u_t[d']`
//!
//! Contraction through the output map: with `s_t = adj_t ⊙ σ'(ŷ_t)`,
//! `g_c += s ⊗ h`, `g_a += s C Γ^A`, `g_b += s C Γ^B`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, PgfError, Result};
use crate::glr::{discretize_step, drive_coeff, Discretization, GlrParams, InputMode};
use crate::io::write_tensor;
use crate::meter::{MemClass, MemoryMeter};
use crate::scalar::{first_non_finite, Scalar};
use crate::tose::BlockPlan;

/// `d/dz [expm1(z)/z]`, with a series near zero where the closed form cancels.
pub fn phi_prime<T: Scalar>(z: T) -> T {
    if z.abs() < T::lit(1e-2) {
        // Σ (k+1) z^k / (k+2)!
        let c = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
        ];
        c.iter().rev().fold(T::zero(), |acc, &ci| acc * z + T::lit(ci))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `∂b̄/∂A` for one lane.
#[inline]
pub fn drive_da<T: Scalar>(disc: Discretization, delta: T, a: T, x: T) -> T {
    match disc {
        Discretization::Euler => T::zero(),
        Discretization::Zoh => delta * delta * phi_prime(delta * a) * x,
    }
}

/// Carried primal state plus parameter sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityFlow<T> {
    pub d: usize,
    pub n: usize,
    pub mode: InputMode,
    /// `[D, N]`.
    pub h: Vec<T>,
    /// `[D, N]`.
    pub gamma_a: Vec<T>,
    /// `[D, N]` for fixed input, `[D, N, D]` for selective input.
    pub gamma_b: Vec<T>,
}

impl<T: Scalar> SensitivityFlow<T> {
    pub fn zeros(params: &GlrParams<T>) -> Self {
        let w = params.lanes();
        let gb = match params.input_mode {
            InputMode::Fixed => w,
            InputMode::Selective => w * params.d,
        };
        SensitivityFlow {
            d: params.d,
            n: params.n,
            mode: params.input_mode,
            h: vec![T::zero(); w],
            gamma_a: vec![T::zero(); w],
            gamma_b: vec![T::zero(); gb],
        }
    }

    pub fn bytes(&self) -> usize {
        (self.h.len() + self.gamma_a.len() + self.gamma_b.len()) * T::bytes()
    }

    pub fn is_finite(&self) -> bool {
        first_non_finite(&self.h).is_none()
            && first_non_finite(&self.gamma_a).is_none()
            && first_non_finite(&self.gamma_b).is_none()
    }
}

/// Per-step buffers reused across steps.
#[derive(Debug, Clone)]
pub struct StepScratch<T> {
    bsel: Vec<T>,
    a_bar: Vec<T>,
    b_bar: Vec<T>,
    delta: Vec<T>,
    y: Vec<T>,
    y_hat: Vec<T>,
}

impl<T: Scalar> StepScratch<T> {
    pub fn new(params: &GlrParams<T>) -> Self {
        let (d, w) = (params.d, params.lanes());
        StepScratch {
            bsel: Vec::with_capacity(params.n),
            a_bar: vec![T::zero(); w],
            b_bar: vec![T::zero(); w],
            delta: vec![T::zero(); d],
            y: vec![T::zero(); d],
            y_hat: vec![T::zero(); d],
        }
    }

    pub fn bytes(&self) -> usize {
        (self.bsel.capacity()
            + self.a_bar.len()
            + self.b_bar.len()
            + self.delta.len()
            + self.y.len()
            + self.y_hat.len())
            * T::bytes()
    }

    /// Output of the last evolved step.
    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn y_hat(&self) -> &[T] {
        &self.y_hat
    }
}

/// Advances `flow` by one input step: sensitivities first (they need
/// `h_{t-1}`), then the primal state, then `(y_t, ŷ_t)` into `scratch`.
pub fn gamma_evolve<T: Scalar>(
    params: &GlrParams<T>,
    u_t: &[T],
    flow: &mut SensitivityFlow<T>,
    scratch: &mut StepScratch<T>,
) {
    let (dd, nn) = (params.d, params.n);
    let StepScratch {
        bsel,
        a_bar,
        b_bar,
        delta,
        y,
        y_hat,
    } = scratch;
    discretize_step(params, u_t, bsel, a_bar, b_bar, delta);
    for d in 0..dd {
        let dt = delta[d];
        for n in 0..nn {
            let lane = d * nn + n;
            let a = params.a(lane);
            let ab = a_bar[lane];
            let x = params.b_lane(bsel, d, n) * u_t[d];
            let h_prev = flow.h[lane];
            flow.gamma_a[lane] = ab * flow.gamma_a[lane]
                + dt * ab * h_prev
                + drive_da(params.discretization, dt, a, x);
            let coeff = drive_coeff(params.discretization, dt, a);
            match flow.mode {
                InputMode::Fixed => {
                    flow.gamma_b[lane] = ab * flow.gamma_b[lane] + coeff * u_t[d];
                }
                InputMode::Selective => {
                    let cu = coeff * u_t[d];
                    let row = &mut flow.gamma_b[lane * dd..(lane + 1) * dd];
                    for (g, &uq) in row.iter_mut().zip(u_t) {
                        *g = ab * *g + cu * uq;
                    }
                }
            }
            flow.h[lane] = ab * h_prev + b_bar[lane];
        }
    }
    crate::glr::output_map_into(params, &flow.h, u_t, y, y_hat);
}

/// Gradient accumulators for `(C, B, A)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradAccumulators<T> {
    pub d: usize,
    pub n: usize,
    /// `[D, N]`.
    pub g_c: Vec<T>,
    /// `[N, D]`, same layout as `b_weight`.
    pub g_b: Vec<T>,
    /// `[D, N]`, with respect to the continuous `A`.
    pub g_a: Vec<T>,
}

impl<T: Scalar> GradAccumulators<T> {
    pub fn zeros(d: usize, n: usize) -> Self {
        GradAccumulators {
            d,
            n,
            g_c: vec![T::zero(); d * n],
            g_b: vec![T::zero(); n * d],
            g_a: vec![T::zero(); d * n],
        }
    }

    pub fn bytes(&self) -> usize {
        3 * self.d * self.n * T::bytes()
    }

    /// Gradient with respect to `a_log` (`∂A/∂a_log = A`).
    pub fn g_a_log(&self, params: &GlrParams<T>) -> Vec<T> {
        self.g_a
            .iter()
            .enumerate()
            .map(|(lane, &g)| g * params.a(lane))
            .collect()
    }

    /// Writes `g_c`, `g_b`, `g_a` as tensor files under `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        write_tensor(&dir.join("g_c.bin"), self.n, &self.g_c)?;
        write_tensor(&dir.join("g_b.bin"), self.d, &self.g_b)?;
        write_tensor(&dir.join("g_a.bin"), self.n, &self.g_a)?;
        Ok(())
    }
}

/// `g_c[d, :] += adj[d] σ'(ŷ[d]) h[d, :]`.
pub fn grad_c_accumulate<T: Scalar>(
    params: &GlrParams<T>,
    adjoint_t: &[T],
    y_hat_t: &[T],
    h_t: &[T],
    acc: &mut GradAccumulators<T>,
) {
    let n = params.n;
    for d in 0..params.d {
        let s = adjoint_t[d] * params.activation.deriv(y_hat_t[d]);
        for k in 0..n {
            acc.g_c[d * n + k] += s * h_t[d * n + k];
        }
    }
}

/// Folds one step's `(A, B)` contributions into `acc`.
fn grad_ab_accumulate<T: Scalar>(
    params: &GlrParams<T>,
    adjoint_t: &[T],
    y_hat_t: &[T],
    flow: &SensitivityFlow<T>,
    acc: &mut GradAccumulators<T>,
) {
    let (dd, nn) = (params.d, params.n);
    for d in 0..dd {
        let s = adjoint_t[d] * params.activation.deriv(y_hat_t[d]);
        for n in 0..nn {
            let lane = d * nn + n;
            let sc = s * params.c_weight[lane];
            acc.g_a[lane] += sc * flow.gamma_a[lane];
            match flow.mode {
                InputMode::Fixed => acc.g_b[n * dd + d] += sc * flow.gamma_b[lane],
                InputMode::Selective => {
                    let row = &flow.gamma_b[lane * dd..(lane + 1) * dd];
                    for (q, &g) in row.iter().enumerate() {
                        acc.g_b[n * dd + q] += sc * g;
                    }
                }
            }
        }
    }
}

/// Built-in scalar losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½ Σ_t ‖y_t‖²`; adjoint `y_t`.
    SumOfSquares,
    /// Mean over all `L·D` outputs; adjoint `1 / (L·D)`.
    Mean,
}

impl Loss {
    pub fn value<T: Scalar>(self, y: &[T]) -> f64 {
        match self {
            Loss::SumOfSquares => 0.5 * y.iter().map(|v| v.as_f64().powi(2)).sum::<f64>(),
            Loss::Mean => y.iter().map(|v| v.as_f64()).sum::<f64>() / y.len() as f64,
        }
    }
}

/// Where `∂ℓ/∂y_t` comes from.
#[derive(Debug, Clone, Copy)]
pub enum AdjointSignal<'a, T> {
    /// Explicit `[L, D]` tensor.
    Tensor(&'a [T]),
    /// Computed on the fly from the step output.
    Loss(Loss),
}

/// One forward pass accumulating `(g_c, g_b, g_a)` block by block.
pub fn accumulate_all<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    adjoint: AdjointSignal<'_, T>,
    plan: &BlockPlan,
    meter: &MemoryMeter,
) -> Result<GradAccumulators<T>> {
    params.validate()?;
    let d = params.d;
    check_len("u (L x D)", plan.len * d, u.len())?;
    check_finite("u", u)?;
    if let AdjointSignal::Tensor(a) = adjoint {
        check_len("adjoint (L x D)", u.len(), a.len())?;
        check_finite("adjoint", a)?;
    }
    let mean_adj = T::lit(1.0 / u.len() as f64);

    let g = MemClass::Graph;
    let mut acc = GradAccumulators::zeros(d, params.n);
    meter.track(MemClass::Accumulator, acc.bytes())?;
    let mut flow = SensitivityFlow::zeros(params);
    meter.track(g, flow.bytes())?;

    let result = (|| -> Result<()> {
        for (k, range) in plan.ranges().enumerate() {
            let steps = range.len();
            let mut u_blk = meter.alloc(g, steps * d, T::zero());
            u_blk.copy_from_slice(&u[range.start * d..range.end * d]);
            let mut adj_t = meter.alloc(g, d, T::zero());
            let mut scratch = StepScratch::new(params);
            meter.track(g, scratch.bytes())?;
            for i in 0..steps {
                let u_t = &u_blk[i * d..(i + 1) * d];
                gamma_evolve(params, u_t, &mut flow, &mut scratch);
                match adjoint {
                    AdjointSignal::Tensor(a) => {
                        let t = range.start + i;
                        adj_t.copy_from_slice(&a[t * d..(t + 1) * d]);
                    }
                    AdjointSignal::Loss(Loss::SumOfSquares) => adj_t.copy_from_slice(scratch.y()),
                    AdjointSignal::Loss(Loss::Mean) => adj_t.fill(mean_adj),
                }
                grad_c_accumulate(params, &adj_t, scratch.y_hat(), &flow.h, &mut acc);
                grad_ab_accumulate(params, &adj_t, scratch.y_hat(), &flow, &mut acc);
            }
            meter.release(g, scratch.bytes())?;
            if !flow.is_finite() {
                return Err(PgfError::NonFiniteState {
                    block: k,
                    step: range.end - 1,
                });
            }
        }
        Ok(())
    })();
    meter.release(g, flow.bytes())?;
    meter.release(MemClass::Accumulator, acc.bytes())?;
    result?;
    Ok(acc)
}
