//! Other recurrences with the same augmented structure.
//!
//! Linear attention accumulates `h_t = h_{t-1} + k_t v_tᵀ` and `z_t = z_{t-1} + k_t`
//! and reads out `y_t = qᵀh_t / qᵀz_t`. A decaying recurrence scales the
//! previous state: `h_t = α_t h_{t-1} + k_t v_tᵀ`. Both are per-entry affine
//! recurrences, so every entry of `h` (and of `z`) is one [`AugLane`] with
//! `a = α`, `k = ∇α`, `b = k vᵀ`, `j = ∇k vᵀ + k ∇vᵀ`; linear attention is
//! the case `α ≡ 1`.

use crate::error::{check_len, PgfError, Result};
use crate::meter::{MemClass, MemoryMeter};
use crate::scalar::{first_non_finite, sigmoid, softplus, Scalar};
use crate::scan::{inclusive_scan_tree, Monoid};
use crate::tangent::{AugLane, ScanStrategy};
use crate::tose::BlockPlan;

pub const DIVISION_GUARD: f64 = 1e-12;

/// `elu(x) + 1`, positive for every finite `x`.
pub fn elu_plus_one<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

pub fn elu_plus_one_deriv<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Applies the feature map to raw `x` and pushes `dx` through it.
pub fn feature_map<T: Scalar>(x: &[T], dx: &[T]) -> (Vec<T>, Vec<T>) {
    let phi = x.iter().map(|&v| elu_plus_one(v)).collect();
    let dphi = x
        .iter()
        .zip(dx)
        .map(|(&v, &dv)| elu_plus_one_deriv(v) * dv)
        .collect();
    (phi, dphi)
}

/// Input-dependent decay `α = exp(-softplus(wᵀx))` and its variation along `dx`.
pub fn selective_decay<T: Scalar>(w: &[T], x: &[T], dx: &[T]) -> (T, T) {
    let s: T = w.iter().zip(x).map(|(&a, &b)| a * b).sum();
    let ds: T = w.iter().zip(dx).map(|(&a, &b)| a * b).sum();
    let alpha = (-softplus(s)).exp();
    (alpha, -alpha * sigmoid(s) * ds)
}

/// Linear attention inputs, `[L, Nk]` for keys/queries and `[L, Nv]` for values.
/// Keys and queries are taken after the (positive) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinAttInputs<T> {
    pub nk: usize,
    pub nv: usize,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub queries: Vec<T>,
    pub dkeys: Vec<T>,
    pub dvalues: Vec<T>,
    pub dqueries: Vec<T>,
}

impl<T: Scalar> LinAttInputs<T> {
    pub fn len(&self) -> usize {
        self.keys.len() / self.nk
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn check(&self) -> Result<usize> {
        let len = self.len();
        check_len("keys", len * self.nk, self.keys.len())?;
        check_len("queries", len * self.nk, self.queries.len())?;
        check_len("dkeys", len * self.nk, self.dkeys.len())?;
        check_len("dqueries", len * self.nk, self.dqueries.len())?;
        check_len("values", len * self.nv, self.values.len())?;
        check_len("dvalues", len * self.nv, self.dvalues.len())?;
        Ok(len)
    }
}

/// Key-value state `[Nk, Nv]`, normalizer `[Nk]` and their tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct LinAttState<T> {
    pub h: Vec<T>,
    pub z: Vec<T>,
    pub dh: Vec<T>,
    pub dz: Vec<T>,
}

impl<T: Scalar> LinAttState<T> {
    pub fn zeros(nk: usize, nv: usize) -> Self {
        LinAttState {
            h: vec![T::zero(); nk * nv],
            z: vec![T::zero(); nk],
            dh: vec![T::zero(); nk * nv],
            dz: vec![T::zero(); nk],
        }
    }

    pub fn bytes(&self) -> usize {
        (2 * self.h.len() + 2 * self.z.len()) * T::bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinAttOutput<T> {
    /// `[L, Nv]`.
    pub y: Vec<T>,
    pub dy: Vec<T>,
    pub final_state: LinAttState<T>,
}

/// Per-entry operator of the key-value and normalizer updates at one step.
fn rank_one_ops<T: Scalar>(
    alpha: T,
    dalpha: T,
    k: &[T],
    v: &[T],
    dk: &[T],
    dv: &[T],
    out: &mut [AugLane<T>],
) {
    let nv = v.len();
    for (i, (&ki, &dki)) in k.iter().zip(dk).enumerate() {
        for j in 0..nv {
            out[i * nv + j] = AugLane {
                a: alpha,
                k: dalpha,
                b: ki * v[j],
                j: dki * v[j] + ki * dv[j],
            };
        }
    }
}

/// Streams `(y, ∇y)` for linear attention, handing `(h, z, ∇h, ∇z)` across
/// block boundaries.
pub fn linatt_jvp<T: Scalar>(
    inputs: &LinAttInputs<T>,
    plan: &BlockPlan,
    meter: &MemoryMeter,
) -> Result<LinAttOutput<T>> {
    let len = inputs.check()?;
    check_len("plan length", len, plan.len)?;
    let (nk, nv) = (inputs.nk, inputs.nv);
    let g = MemClass::Graph;
    let mut y = meter.alloc(MemClass::Io, len * nv, T::zero());
    let mut dy = meter.alloc(MemClass::Io, len * nv, T::zero());
    let mut st = LinAttState::zeros(nk, nv);
    meter.track(g, st.bytes())?;
    let guard = T::lit(DIVISION_GUARD);

    let run = (|| -> Result<()> {
        for range in plan.ranges() {
            let mut ops = meter.alloc(g, nk * nv, AugLane::<T>::identity());
            let mut zops = meter.alloc(g, nk, AugLane::<T>::identity());
            let mut num = meter.alloc(g, 2 * nv, T::zero());
            for t in range {
                let kr = t * nk..(t + 1) * nk;
                let vr = t * nv..(t + 1) * nv;
                let (k, dk) = (&inputs.keys[kr.clone()], &inputs.dkeys[kr.clone()]);
                let (v, dv) = (&inputs.values[vr.clone()], &inputs.dvalues[vr.clone()]);
                let (q, dq) = (&inputs.queries[kr.clone()], &inputs.dqueries[kr]);
                rank_one_ops(T::one(), T::zero(), k, v, dk, dv, &mut ops);
                rank_one_ops(T::one(), T::zero(), k, &[T::one()], dk, &[T::zero()], &mut zops);
                for (e, op) in ops.iter().enumerate() {
                    let (h, d) = op.apply(st.h[e], st.dh[e]);
                    st.h[e] = h;
                    st.dh[e] = d;
                }
                for (e, op) in zops.iter().enumerate() {
                    let (z, d) = op.apply(st.z[e], st.dz[e]);
                    st.z[e] = z;
                    st.dz[e] = d;
                }
                let mut den = T::zero();
                let mut dden = T::zero();
                for i in 0..nk {
                    den += q[i] * st.z[i];
                    dden += dq[i] * st.z[i] + q[i] * st.dz[i];
                }
                if den.abs() < guard {
                    return Err(PgfError::DivisionGuard {
                        step: t,
                        value: den.as_f64(),
                    });
                }
                let (nm, dnm) = num.split_at_mut(nv);
                nm.fill(T::zero());
                dnm.fill(T::zero());
                for i in 0..nk {
                    for j in 0..nv {
                        let e = i * nv + j;
                        nm[j] += q[i] * st.h[e];
                        dnm[j] += dq[i] * st.h[e] + q[i] * st.dh[e];
                    }
                }
                for j in 0..nv {
                    y[t * nv + j] = nm[j] / den;
                    dy[t * nv + j] = (dnm[j] * den - nm[j] * dden) / (den * den);
                }
            }
        }
        Ok(())
    })();
    meter.release(g, st.bytes())?;
    run?;
    Ok(LinAttOutput {
        y: y.to_vec(),
        dy: dy.to_vec(),
        final_state: st,
    })
}

/// Primal linear attention map, for finite-difference checks.
pub fn linatt_forward<T: Scalar>(
    nk: usize,
    nv: usize,
    keys: &[T],
    values: &[T],
    queries: &[T],
) -> Vec<T> {
    let len = keys.len() / nk;
    let mut h = vec![T::zero(); nk * nv];
    let mut z = vec![T::zero(); nk];
    let mut y = vec![T::zero(); len * nv];
    for t in 0..len {
        let k = &keys[t * nk..(t + 1) * nk];
        let q = &queries[t * nk..(t + 1) * nk];
        let v = &values[t * nv..(t + 1) * nv];
        for i in 0..nk {
            z[i] += k[i];
            for j in 0..nv {
                h[i * nv + j] += k[i] * v[j];
            }
        }
        let den: T = q.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        for j in 0..nv {
            let num: T = (0..nk).map(|i| q[i] * h[i * nv + j]).sum();
            y[t * nv + j] = num / den;
        }
    }
    y
}

/// Decaying recurrence inputs: `alphas` and `dalphas` are `[L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayInputs<T> {
    pub nk: usize,
    pub nv: usize,
    pub alphas: Vec<T>,
    pub dalphas: Vec<T>,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub dkeys: Vec<T>,
    pub dvalues: Vec<T>,
}

impl<T: Scalar> DecayInputs<T> {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    fn check(&self) -> Result<usize> {
        let len = self.len();
        check_len("dalphas", len, self.dalphas.len())?;
        check_len("keys", len * self.nk, self.keys.len())?;
        check_len("dkeys", len * self.nk, self.dkeys.len())?;
        check_len("values", len * self.nv, self.values.len())?;
        check_len("dvalues", len * self.nv, self.dvalues.len())?;
        if let Some(t) = self
            .alphas
            .iter()
            .position(|&a| !(a > T::zero() && a <= T::one()))
        {
            return Err(PgfError::Invalid(format!(
                "decay at step {t} is {}, outside (0, 1]",
                self.alphas[t]
            )));
        }
        Ok(len)
    }

    /// Augmented operators of step `t`, one per state entry.
    pub fn operators_at(&self, t: usize, out: &mut [AugLane<T>]) {
        let (nk, nv) = (self.nk, self.nv);
        rank_one_ops(
            self.alphas[t],
            self.dalphas[t],
            &self.keys[t * nk..(t + 1) * nk],
            &self.values[t * nv..(t + 1) * nv],
            &self.dkeys[t * nk..(t + 1) * nk],
            &self.dvalues[t * nv..(t + 1) * nv],
            out,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayOutput<T> {
    /// `[L, Nk, Nv]`.
    pub h: Vec<T>,
    /// `[L, Nk, Nv]`.
    pub dh: Vec<T>,
}

/// Streams `(h_t, ∇h_t)` of the decaying recurrence through the augmented
/// operators, block by block.
pub fn decay_jvp<T: Scalar>(
    inputs: &DecayInputs<T>,
    plan: &BlockPlan,
    strategy: ScanStrategy,
    meter: &MemoryMeter,
) -> Result<DecayOutput<T>> {
    let len = inputs.check()?;
    check_len("plan length", len, plan.len)?;
    let e = inputs.nk * inputs.nv;
    let g = MemClass::Graph;
    let mut hs = meter.alloc(MemClass::Io, len * e, T::zero());
    let mut dhs = meter.alloc(MemClass::Io, len * e, T::zero());
    let mut h = meter.alloc(g, e, T::zero());
    let mut dh = meter.alloc(g, e, T::zero());

    for (blk, range) in plan.ranges().enumerate() {
        let steps = range.len();
        let mut ops = meter.alloc(g, steps * e, AugLane::<T>::identity());
        for (i, t) in range.clone().enumerate() {
            inputs.operators_at(t, &mut ops[i * e..(i + 1) * e]);
        }
        match strategy {
            ScanStrategy::Sequential => {
                for (i, t) in range.clone().enumerate() {
                    for k in 0..e {
                        let (a, b) = ops[i * e + k].apply(h[k], dh[k]);
                        h[k] = a;
                        dh[k] = b;
                        hs[t * e + k] = a;
                        dhs[t * e + k] = b;
                    }
                }
            }
            ScanStrategy::Associative => {
                let mut prefix = meter.alloc(g, steps, AugLane::<T>::identity());
                for k in 0..e {
                    for i in 0..steps {
                        prefix[i] = ops[i * e + k];
                    }
                    inclusive_scan_tree(&mut prefix);
                    for (i, t) in range.clone().enumerate() {
                        let (a, b) = prefix[i].apply(h[k], dh[k]);
                        hs[t * e + k] = a;
                        dhs[t * e + k] = b;
                    }
                    h[k] = hs[(range.end - 1) * e + k];
                    dh[k] = dhs[(range.end - 1) * e + k];
                }
            }
        }
        if first_non_finite(&h).or_else(|| first_non_finite(&dh)).is_some() {
            return Err(PgfError::NonFiniteState {
                block: blk,
                step: range.end - 1,
            });
        }
    }
    Ok(DecayOutput {
        h: hs.to_vec(),
        dh: dhs.to_vec(),
    })
}

/// Primal decaying recurrence, `[L, Nk, Nv]` states.
pub fn decay_forward<T: Scalar>(
    nk: usize,
    nv: usize,
    alphas: &[T],
    keys: &[T],
    values: &[T],
) -> Vec<T> {
    let e = nk * nv;
    let mut h = vec![T::zero(); e];
    let mut out = Vec::with_capacity(alphas.len() * e);
    for (t, &a) in alphas.iter().enumerate() {
        for i in 0..nk {
            for j in 0..nv {
                h[i * nv + j] = a * h[i * nv + j] + keys[t * nk + i] * values[t * nv + j];
            }
        }
        out.extend_from_slice(&h);
    }
    out
}
