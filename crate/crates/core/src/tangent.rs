//! First-order tangent flow.
//!
//! Each lane carries the pair `(h, ∇h)` and each step is the lower-triangular
//! block
//!
//! ```text
//! | a  0  b |
//! | k  a  j |
//! | 0  0  1 |
//! ```
//!
//! stored as the four scalars `(a, k, b, j)`. Blocks compose associatively, so
//! the joint primal/tangent evolution can be folded or prefix-scanned.

use crate::error::{check_finite, check_len, PgfError, Result};
use crate::glr::{
    discretize_step, drive_coeff, drive_coeff_ddelta, output_map_into, GlrParams, StepOperator,
};
use crate::meter::{MemClass, MemoryMeter};
use crate::scalar::{first_non_finite, sigmoid, Scalar};
use crate::scan::{inclusive_scan_tree, Monoid};

/// One lane of an augmented operator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugLane<T> {
    pub a: T,
    pub k: T,
    pub b: T,
    pub j: T,
}

impl<T: Scalar> Monoid for AugLane<T> {
    fn identity() -> Self {
        AugLane {
            a: T::one(),
            k: T::zero(),
            b: T::zero(),
            j: T::zero(),
        }
    }

    #[inline]
    fn compose(m2: Self, m1: Self) -> Self {
        AugLane {
            a: m2.a * m1.a,
            k: m2.k * m1.a + m2.a * m1.k,
            b: m2.a * m1.b + m2.b,
            j: m2.k * m1.b + m2.a * m1.j + m2.j,
        }
    }
}

impl<T: Scalar> AugLane<T> {
    /// `(h, ∇h) -> (a h + b, k h + a ∇h + j)`.
    #[inline]
    pub fn apply(self, h: T, dh: T) -> (T, T) {
        (self.a * h + self.b, self.k * h + self.a * dh + self.j)
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.k.is_finite() && self.b.is_finite() && self.j.is_finite()
    }
}

/// Batched augmented operators, `[L, D, N]` lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedOperator<T> {
    pub len: usize,
    pub d: usize,
    pub n: usize,
    pub lanes: Vec<AugLane<T>>,
}

impl<T: Scalar> AugmentedOperator<T> {
    pub fn identity(len: usize, d: usize, n: usize) -> Self {
        AugmentedOperator {
            len,
            d,
            n,
            lanes: vec![AugLane::identity(); len * d * n],
        }
    }

    pub fn at(&self, t: usize) -> &[AugLane<T>] {
        let w = self.d * self.n;
        &self.lanes[t * w..(t + 1) * w]
    }

    /// Splits back into `(a, k, b, j)` tensors.
    pub fn unpack(&self) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let a = self.lanes.iter().map(|l| l.a).collect();
        let k = self.lanes.iter().map(|l| l.k).collect();
        let b = self.lanes.iter().map(|l| l.b).collect();
        let j = self.lanes.iter().map(|l| l.j).collect();
        (a, k, b, j)
    }
}

/// Synchronized primal and tangent state, `[D, N]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState<T> {
    pub d: usize,
    pub n: usize,
    pub h: Vec<T>,
    pub dh: Vec<T>,
}

impl<T: Scalar> DualState<T> {
    pub fn zeros(d: usize, n: usize) -> Self {
        DualState {
            d,
            n,
            h: vec![T::zero(); d * n],
            dh: vec![T::zero(); d * n],
        }
    }

    pub fn is_finite(&self) -> bool {
        first_non_finite(&self.h).is_none() && first_non_finite(&self.dh).is_none()
    }

    pub fn bytes(&self) -> usize {
        2 * self.d * self.n * T::bytes()
    }
}

/// Input variation `∇u`, `[L, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T> {
    pub d: usize,
    pub du: Vec<T>,
}

impl<T: Scalar> Perturbation<T> {
    pub fn new(d: usize, du: Vec<T>) -> Result<Self> {
        if d == 0 || du.len() % d != 0 {
            return Err(PgfError::Shape {
                what: "perturbation (L x D)",
                expected: d,
                got: du.len(),
            });
        }
        Ok(Perturbation { d, du })
    }

    pub fn zeros(len: usize, d: usize) -> Self {
        Perturbation {
            d,
            du: vec![T::zero(); len * d],
        }
    }

    /// `ε` at `(t0, channel)`, zero elsewhere.
    pub fn pulse(len: usize, d: usize, t0: usize, channel: usize, eps: T) -> Self {
        let mut p = Self::zeros(len, d);
        p.du[t0 * d + channel] = eps;
        p
    }

    pub fn len(&self) -> usize {
        self.du.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.du.is_empty()
    }
}

/// Writes `K_t = (∂Ā_t/∂u_t)·∇u_t` and `j_t = (∂b̄_t/∂u_t)·∇u_t` for one step.
///
/// `dΔ = sigmoid(w u + bias) · w · ∇u`, `K = Ā A dΔ`, and with `x = B u`,
/// `∇x = (∇B) u + B ∇u`: Euler `j = dΔ x + Δ ∇x`, ZOH
/// `j = Ā dΔ x + ((Ā − 1)/A) ∇x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn selectivity_step<T: Scalar>(
    params: &GlrParams<T>,
    u_t: &[T],
    du_t: &[T],
    a_bar_t: &[T],
    delta_t: &[T],
    bsel: &mut Vec<T>,
    dbsel: &mut Vec<T>,
    k_out: &mut [T],
    j_out: &mut [T],
) {
    let n_st = params.n;
    params.selective_b(u_t, bsel);
    params.selective_b(du_t, dbsel);
    for d in 0..params.d {
        let z = params.delta_arg(d, u_t[d]);
        let ddelta = sigmoid(z) * params.delta_weight[d] * du_t[d];
        let dt = delta_t[d];
        for n in 0..n_st {
            let lane = d * n_st + n;
            let a = params.a(lane);
            let ab = a_bar_t[lane];
            let bl = params.b_lane(bsel, d, n);
            let dbl = if dbsel.is_empty() {
                T::zero()
            } else {
                dbsel[n]
            };
            let x = bl * u_t[d];
            let dx = dbl * u_t[d] + bl * du_t[d];
            k_out[lane] = ab * a * ddelta;
            j_out[lane] = drive_coeff_ddelta(params.discretization, ab) * ddelta * x
                + drive_coeff(params.discretization, dt, a) * dx;
        }
    }
}

/// Selectivity Jacobians `(K_t, j_t)` of one step, each `[D, N]`.
pub fn selectivity_jacobian<T: Scalar>(
    params: &GlrParams<T>,
    u_t: &[T],
    du_t: &[T],
    a_bar_t: &[T],
    delta_t: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    check_len("u_t", params.d, u_t.len())?;
    check_len("du_t", params.d, du_t.len())?;
    check_len("a_bar_t", params.lanes(), a_bar_t.len())?;
    check_len("delta_t", params.d, delta_t.len())?;
    let w = params.lanes();
    let (mut k, mut j) = (vec![T::zero(); w], vec![T::zero(); w]);
    let (mut bsel, mut dbsel) = (Vec::new(), Vec::new());
    selectivity_step(
        params, u_t, du_t, a_bar_t, delta_t, &mut bsel, &mut dbsel, &mut k, &mut j,
    );
    Ok((k, j))
}

/// Packs a step operator and its selectivity Jacobians into `(a, k, b, j)` lanes.
pub fn augment<T: Scalar>(
    step: &StepOperator<T>,
    k: &[T],
    j: &[T],
) -> Result<AugmentedOperator<T>> {
    let total = step.len * step.lanes();
    check_len("a_bar", total, step.a_bar.len())?;
    check_len("b_bar", total, step.b_bar.len())?;
    check_len("K", total, k.len())?;
    check_len("j", total, j.len())?;
    let lanes = (0..total)
        .map(|i| AugLane {
            a: step.a_bar[i],
            k: k[i],
            b: step.b_bar[i],
            j: j[i],
        })
        .collect();
    Ok(AugmentedOperator {
        len: step.len,
        d: step.d,
        n: step.n,
        lanes,
    })
}

/// Lane-wise `m2 ∘ m1` (apply `m1` first).
pub fn compose<T: Scalar>(
    m2: &AugmentedOperator<T>,
    m1: &AugmentedOperator<T>,
) -> Result<AugmentedOperator<T>> {
    check_len("compose lanes", m2.lanes.len(), m1.lanes.len())?;
    Ok(AugmentedOperator {
        len: m2.len,
        d: m2.d,
        n: m2.n,
        lanes: m2
            .lanes
            .iter()
            .zip(&m1.lanes)
            .map(|(&x, &y)| AugLane::compose(x, y))
            .collect(),
    })
}

/// Applies one step's lanes (`[D, N]`) to a dual state.
pub fn apply<T: Scalar>(m: &[AugLane<T>], s: &DualState<T>) -> Result<DualState<T>> {
    check_len("apply lanes", s.h.len(), m.len())?;
    let mut out = s.clone();
    for (i, lane) in m.iter().enumerate() {
        let (h, dh) = lane.apply(s.h[i], s.dh[i]);
        out.h[i] = h;
        out.dh[i] = dh;
    }
    Ok(out)
}

/// `∇y_t = σ'(ŷ_t) · (Σ_n C[d,n] ∇h_t[d,n] + D_res[d] ∇u_t[d])`.
pub fn tangent_output<T: Scalar>(
    params: &GlrParams<T>,
    dh_t: &[T],
    du_t: &[T],
    y_hat_t: &[T],
) -> Vec<T> {
    let mut dy = vec![T::zero(); params.d];
    tangent_output_into(params, dh_t, du_t, y_hat_t, &mut dy);
    dy
}

pub(crate) fn tangent_output_into<T: Scalar>(
    params: &GlrParams<T>,
    dh_t: &[T],
    du_t: &[T],
    y_hat_t: &[T],
    dy: &mut [T],
) {
    let n = params.n;
    for d in 0..params.d {
        let row = d * n..(d + 1) * n;
        let mut acc = T::zero();
        for (&c, &g) in params.c_weight[row.clone()].iter().zip(&dh_t[row]) {
            acc += c * g;
        }
        acc += params.d_res[d] * du_t[d];
        // trailing +0 canonicalises a negative zero
        dy[d] = params.activation.deriv(y_hat_t[d]) * acc + T::zero();
    }
}

/// How the joint recurrence is evaluated inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStrategy {
    /// Fold `apply` step by step.
    #[default]
    Sequential,
    /// Tree prefix scan of the augmented operators, then one `apply` per step.
    Associative,
}

/// Evolves `state` across one block of inputs and writes `y`, `∇y`.
///
/// Every per-block buffer is registered as graph memory on `meter` and
/// released before returning; only `state` survives.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evolve_block<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    du: &[T],
    state: &mut DualState<T>,
    strategy: ScanStrategy,
    y: &mut [T],
    dy: &mut [T],
    meter: &MemoryMeter,
    block_index: usize,
) -> Result<()> {
    let (d, w) = (params.d, params.lanes());
    let len = u.len() / d;
    let g = MemClass::Graph;

    let mut a_bar = meter.alloc(g, len * w, T::zero());
    let mut b_bar = meter.alloc(g, len * w, T::zero());
    let mut delta = meter.alloc(g, len * d, T::zero());
    let mut ops = meter.alloc(g, len * w, AugLane::<T>::identity());
    let mut k_t = meter.alloc(g, w, T::zero());
    let mut j_t = meter.alloc(g, w, T::zero());
    let (mut bsel, mut dbsel) = (Vec::with_capacity(params.n), Vec::with_capacity(params.n));

    for t in 0..len {
        let (u_t, du_t) = (&u[t * d..(t + 1) * d], &du[t * d..(t + 1) * d]);
        let lanes = t * w..(t + 1) * w;
        discretize_step(
            params,
            u_t,
            &mut bsel,
            &mut a_bar[lanes.clone()],
            &mut b_bar[lanes.clone()],
            &mut delta[t * d..(t + 1) * d],
        );
        selectivity_step(
            params,
            u_t,
            du_t,
            &a_bar[lanes.clone()],
            &delta[t * d..(t + 1) * d],
            &mut bsel,
            &mut dbsel,
            &mut k_t,
            &mut j_t,
        );
        for (i, op) in ops[lanes].iter_mut().enumerate() {
            *op = AugLane {
                a: a_bar[t * w + i],
                k: k_t[i],
                b: b_bar[t * w + i],
                j: j_t[i],
            };
        }
    }

    let mut hs = meter.alloc(g, len * w, T::zero());
    let mut dhs = meter.alloc(g, len * w, T::zero());
    match strategy {
        ScanStrategy::Sequential => {
            for t in 0..len {
                for lane in 0..w {
                    let (h, dh) = ops[t * w + lane].apply(state.h[lane], state.dh[lane]);
                    state.h[lane] = h;
                    state.dh[lane] = dh;
                    hs[t * w + lane] = h;
                    dhs[t * w + lane] = dh;
                }
            }
        }
        ScanStrategy::Associative => {
            let mut prefix = meter.alloc(g, len, AugLane::<T>::identity());
            for lane in 0..w {
                for t in 0..len {
                    prefix[t] = ops[t * w + lane];
                }
                inclusive_scan_tree(&mut prefix);
                for t in 0..len {
                    let (h, dh) = prefix[t].apply(state.h[lane], state.dh[lane]);
                    hs[t * w + lane] = h;
                    dhs[t * w + lane] = dh;
                }
                state.h[lane] = hs[(len - 1) * w + lane];
                state.dh[lane] = dhs[(len - 1) * w + lane];
            }
        }
    }

    let bad = first_non_finite(&hs).or_else(|| first_non_finite(&dhs));
    if let Some(i) = bad {
        return Err(PgfError::NonFiniteState {
            block: block_index,
            step: i / w,
        });
    }

    let mut y_hat = meter.alloc(g, d, T::zero());
    for t in 0..len {
        let (u_t, du_t) = (&u[t * d..(t + 1) * d], &du[t * d..(t + 1) * d]);
        output_map_into(
            params,
            &hs[t * w..(t + 1) * w],
            u_t,
            &mut y[t * d..(t + 1) * d],
            &mut y_hat,
        );
        tangent_output_into(
            params,
            &dhs[t * w..(t + 1) * w],
            du_t,
            &y_hat,
            &mut dy[t * d..(t + 1) * d],
        );
    }
    Ok(())
}

/// Primal and tangent outputs of a full sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct JvpOutput<T> {
    /// `[L, D]`.
    pub y: Vec<T>,
    /// `[L, D]`.
    pub dy: Vec<T>,
    pub final_state: DualState<T>,
}

pub(crate) fn check_sequence<T: Scalar>(params: &GlrParams<T>, u: &[T], du: &[T]) -> Result<usize> {
    params.validate()?;
    let d = params.d;
    if u.is_empty() || u.len() % d != 0 {
        return Err(PgfError::Shape {
            what: "u (L x D, L >= 1)",
            expected: d,
            got: u.len(),
        });
    }
    check_len("du", u.len(), du.len())?;
    check_finite("u", u)?;
    check_finite("du", du)?;
    Ok(u.len() / d)
}

/// Dense reference evaluation of `(y, ∇y)`; holds the whole sequence.
pub fn pgf_jvp_dense<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    du: &[T],
    h0: Option<&DualState<T>>,
    strategy: ScanStrategy,
) -> Result<JvpOutput<T>> {
    check_sequence(params, u, du)?;
    let mut state = match h0 {
        Some(s) => {
            check_len("h0", params.lanes(), s.h.len())?;
            check_len("dh0", params.lanes(), s.dh.len())?;
            s.clone()
        }
        None => DualState::zeros(params.d, params.n),
    };
    let mut y = vec![T::zero(); u.len()];
    let mut dy = vec![T::zero(); u.len()];
    let scratch = MemoryMeter::new();
    evolve_block(
        params, u, du, &mut state, strategy, &mut y, &mut dy, &scratch, 0,
    )?;
    Ok(JvpOutput {
        y,
        dy,
        final_state: state,
    })
}

/// Dense `(h, ∇h)` trajectories, `[L, D, N]` each, from a zero dual state.
pub fn pgf_jvp_dense_states<T: Scalar>(
    params: &GlrParams<T>,
    u: &[T],
    du: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let len = check_sequence(params, u, du)?;
    let (d, w) = (params.d, params.lanes());
    let step = crate::glr::discretize(params, u)?;
    let mut hs = vec![T::zero(); len * w];
    let mut dhs = vec![T::zero(); len * w];
    let mut s = DualState::zeros(params.d, params.n);
    for t in 0..len {
        let (k, j) = selectivity_jacobian(
            params,
            &u[t * d..(t + 1) * d],
            &du[t * d..(t + 1) * d],
            step.a_bar_at(t),
            step.delta_at(t),
        )?;
        for lane in 0..w {
            let op = AugLane {
                a: step.a_bar[t * w + lane],
                k: k[lane],
                b: step.b_bar[t * w + lane],
                j: j[lane],
            };
            let (h, dh) = op.apply(s.h[lane], s.dh[lane]);
            s.h[lane] = h;
            s.dh[lane] = dh;
        }
        hs[t * w..(t + 1) * w].copy_from_slice(&s.h);
        dhs[t * w..(t + 1) * w].copy_from_slice(&s.dh);
    }
    Ok((hs, dhs))
}
