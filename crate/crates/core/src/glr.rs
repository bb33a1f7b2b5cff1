//! Selective diagonal linear recurrence: parameters, discretization, primal
//! scans and the output map.
//!
//! Layout conventions (all row-major, flat `Vec<T>`):
//! - sequences `u`, `y`: `[L, D]`
//! - lane tensors (`a_bar`, `b_bar`, states): `[L, D, N]`, lane index `d * N + n`
//! - `b_weight`: `[N, D]`, `c_weight` and `a_log`: `[D, N]`

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, PgfError, Result};
use crate::sample::{normal_vec, uniform_vec};
use crate::scalar::{sigmoid, softplus, softplus_inv, Scalar};
use crate::scan::{inclusive_scan_tree, Monoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Silu,
}

impl Activation {
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn deriv<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }

    pub fn second_deriv<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::zero(),
            Activation::Silu => {
                let s = sigmoid(x);
                let two = T::lit(2.0);
                s * (T::one() - s) * (two + x * (T::one() - two * s))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    #[default]
    Zoh,
    Euler,
}

/// How the per-lane input matrix is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `B_t = b_weight · u_t` (length N, shared by every channel).
    #[default]
    Selective,
    /// `B[d, n] = b_weight[n, d]`, independent of the input.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlrParams<T> {
    pub d: usize,
    pub n: usize,
    /// `[D, N]`; continuous `A = -exp(a_log)`.
    pub a_log: Vec<T>,
    /// `[N, D]`.
    pub b_weight: Vec<T>,
    /// `[D, N]`.
    pub c_weight: Vec<T>,
    pub d_res: Vec<T>,
    pub delta_weight: Vec<T>,
    pub delta_bias: Vec<T>,
    pub activation: Activation,
    pub discretization: Discretization,
    pub input_mode: InputMode,
}

impl<T: Scalar> GlrParams<T> {
    /// A random instance: `A ∈ [-3, -0.3]`, `Δ` biased into `[0.05, 1]`,
    /// Gaussian projections. Streams are fixed so instances are reproducible.
    pub fn random(d: usize, n: usize, seed: u64) -> Self {
        let dn = d * n;
        let a_log = uniform_vec(seed, 101, dn, 0.3f64.ln(), 3.0f64.ln());
        let b_scale = T::lit(1.0 / (d as f64).sqrt());
        let c_scale = T::lit(1.0 / (n as f64).sqrt());
        let b_weight = normal_vec::<T>(seed, 102, n * d)
            .into_iter()
            .map(|x| x * b_scale)
            .collect();
        let c_weight = normal_vec::<T>(seed, 103, dn)
            .into_iter()
            .map(|x| x * c_scale)
            .collect();
        let d_res = normal_vec::<T>(seed, 104, d)
            .into_iter()
            .map(|x| x * T::lit(0.5))
            .collect();
        let delta_weight = normal_vec::<T>(seed, 105, d)
            .into_iter()
            .map(|x| x * T::lit(0.5))
            .collect();
        let delta_bias = uniform_vec::<T>(seed, 106, d, 0.05, 1.0)
            .into_iter()
            .map(softplus_inv)
            .collect();
        GlrParams {
            d,
            n,
            a_log,
            b_weight,
            c_weight,
            d_res,
            delta_weight,
            delta_bias,
            activation: Activation::Identity,
            discretization: Discretization::Zoh,
            input_mode: InputMode::Selective,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_discretization(mut self, discretization: Discretization) -> Self {
        self.discretization = discretization;
        self
    }

    pub fn with_input_mode(mut self, input_mode: InputMode) -> Self {
        self.input_mode = input_mode;
        self
    }

    /// Turns off selectivity: constant `Δ = softplus(delta_bias)` and fixed `B`.
    pub fn non_selective(mut self) -> Self {
        self.delta_weight.iter_mut().for_each(|w| *w = T::zero());
        self.input_mode = InputMode::Fixed;
        self
    }

    pub fn lanes(&self) -> usize {
        self.d * self.n
    }

    /// Continuous-time diagonal entry of lane `lane = d * N + n`.
    #[inline]
    pub fn a(&self, lane: usize) -> T {
        -self.a_log[lane].exp()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d, self.n);
        if d == 0 || n == 0 {
            return Err(PgfError::Invalid(format!("empty dimensions D={d} N={n}")));
        }
        check_len("a_log", d * n, self.a_log.len())?;
        check_len("b_weight", n * d, self.b_weight.len())?;
        check_len("c_weight", d * n, self.c_weight.len())?;
        check_len("d_res", d, self.d_res.len())?;
        check_len("delta_weight", d, self.delta_weight.len())?;
        check_len("delta_bias", d, self.delta_bias.len())?;
        check_finite("a_log", &self.a_log)?;
        check_finite("b_weight", &self.b_weight)?;
        check_finite("c_weight", &self.c_weight)?;
        check_finite("d_res", &self.d_res)?;
        check_finite("delta_weight", &self.delta_weight)?;
        check_finite("delta_bias", &self.delta_bias)?;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> GlrParams<U> {
        use crate::scalar::cast_vec;
        GlrParams {
            d: self.d,
            n: self.n,
            a_log: cast_vec(&self.a_log),
            b_weight: cast_vec(&self.b_weight),
            c_weight: cast_vec(&self.c_weight),
            d_res: cast_vec(&self.d_res),
            delta_weight: cast_vec(&self.delta_weight),
            delta_bias: cast_vec(&self.delta_bias),
            activation: self.activation,
            discretization: self.discretization,
            input_mode: self.input_mode,
        }
    }

    /// Pre-softplus step-size argument for channel `d`.
    #[inline]
    pub(crate) fn delta_arg(&self, d: usize, u: T) -> T {
        self.delta_weight[d] * u + self.delta_bias[d]
    }

    /// Selective `B_t = b_weight · u_t` (length N). Empty in fixed mode.
    pub(crate) fn selective_b(&self, u_t: &[T], out: &mut Vec<T>) {
        out.clear();
        if self.input_mode == InputMode::Selective {
            for n in 0..self.n {
                let row = &self.b_weight[n * self.d..(n + 1) * self.d];
                out.push(row.iter().zip(u_t).map(|(&w, &u)| w * u).sum());
            }
        }
    }

    /// Input matrix entry `B[d, n]` given the selective projection.
    #[inline]
    pub(crate) fn b_lane(&self, bsel: &[T], d: usize, n: usize) -> T {
        match self.input_mode {
            InputMode::Selective => bsel[n],
            InputMode::Fixed => self.b_weight[n * self.d + d],
        }
    }
}

/// Drive coefficient `b̄ / (B u)`: `Δ` for Euler, `(exp(ΔA) - 1) / A` for ZOH.
#[inline]
pub fn drive_coeff<T: Scalar>(disc: Discretization, delta: T, a: T) -> T {
    match disc {
        Discretization::Euler => delta,
        Discretization::Zoh => (delta * a).exp_m1() / a,
    }
}

/// `d(drive_coeff)/dΔ`: `1` for Euler, `Ā` for ZOH.
#[inline]
pub(crate) fn drive_coeff_ddelta<T: Scalar>(disc: Discretization, a_bar: T) -> T {
    match disc {
        Discretization::Euler => T::one(),
        Discretization::Zoh => a_bar,
    }
}

/// Discretized per-step operator for every lane.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOperator<T> {
    pub len: usize,
    pub d: usize,
    pub n: usize,
    /// `[L, D, N]`, each entry in `(0, 1)`.
    pub a_bar: Vec<T>,
    /// `[L, D, N]`.
    pub b_bar: Vec<T>,
    /// `[L, D]`.
    pub delta: Vec<T>,
}

impl<T: Scalar> StepOperator<T> {
    pub fn lanes(&self) -> usize {
        self.d * self.n
    }

    pub fn a_bar_at(&self, t: usize) -> &[T] {
        let w = self.lanes();
        &self.a_bar[t * w..(t + 1) * w]
    }

    pub fn b_bar_at(&self, t: usize) -> &[T] {
        let w = self.lanes();
        &self.b_bar[t * w..(t + 1) * w]
    }

    pub fn delta_at(&self, t: usize) -> &[T] {
        &self.delta[t * self.d..(t + 1) * self.d]
    }
}

/// Discretizes one time step into caller-provided slices.
pub(crate) fn discretize_step<T: Scalar>(
    params: &GlrParams<T>,
    u_t: &[T],
    bsel: &mut Vec<T>,
    a_bar: &mut [T],
    b_bar: &mut [T],
    delta: &mut [T],
) {
    let n_st = params.n;
    params.selective_b(u_t, bsel);
    for d in 0..params.d {
        let dt = softplus(params.delta_arg(d, u_t[d]));
        delta[d] = dt;
        for n in 0..n_st {
            let lane = d * n_st + n;
            let a = params.a(lane);
            a_bar[lane] = (dt * a).exp();
            let x = params.b_lane(bsel, d, n) * u_t[d];
            b_bar[lane] = drive_coeff(params.discretization, dt, a) * x;
        }
    }
}

pub fn discretize<T: Scalar>(params: &GlrParams<T>, u: &[T]) -> Result<StepOperator<T>> {
    params.validate()?;
    let (d, lanes) = (params.d, params.lanes());
    if u.is_empty() || u.len() % d != 0 {
        return Err(PgfError::Shape {
            what: "u (L x D, L >= 1)",
            expected: d,
            got: u.len(),
        });
    }
    check_finite("u", u)?;
    let len = u.len() / d;
    let mut ops = StepOperator {
        len,
        d,
        n: params.n,
        a_bar: vec![T::zero(); len * lanes],
        b_bar: vec![T::zero(); len * lanes],
        delta: vec![T::zero(); len * d],
    };
    let mut bsel = Vec::with_capacity(params.n);
    for t in 0..len {
        discretize_step(
            params,
            &u[t * d..(t + 1) * d],
            &mut bsel,
            &mut ops.a_bar[t * lanes..(t + 1) * lanes],
            &mut ops.b_bar[t * lanes..(t + 1) * lanes],
            &mut ops.delta[t * d..(t + 1) * d],
        );
    }
    Ok(ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Dense,
    Streaming,
}

/// Primal states: all `L` of them, or only the last.
#[derive(Debug, Clone, PartialEq)]
pub enum StateTrajectory<T> {
    Dense { len: usize, lanes: usize, h: Vec<T> },
    Streaming { lanes: usize, h_last: Vec<T> },
}

impl<T: Scalar> StateTrajectory<T> {
    pub fn provenance(&self) -> Provenance {
        match self {
            StateTrajectory::Dense { .. } => Provenance::Dense,
            StateTrajectory::Streaming { .. } => Provenance::Streaming,
        }
    }

    pub fn stored_states(&self) -> usize {
        match self {
            StateTrajectory::Dense { len, .. } => *len,
            StateTrajectory::Streaming { .. } => 1,
        }
    }

    pub fn last(&self) -> &[T] {
        match self {
            StateTrajectory::Dense { len, lanes, h } => &h[(len - 1) * lanes..],
            StateTrajectory::Streaming { h_last, .. } => h_last,
        }
    }

    pub fn states(&self) -> Option<&[T]> {
        match self {
            StateTrajectory::Dense { h, .. } => Some(h),
            StateTrajectory::Streaming { .. } => None,
        }
    }

    pub fn into_streaming(self) -> Self {
        match self {
            StateTrajectory::Dense { lanes, .. } => StateTrajectory::Streaming {
                lanes,
                h_last: self.last().to_vec(),
            },
            s => s,
        }
    }
}

fn check_h0<T: Scalar>(ops: &StepOperator<T>, h0: &[T]) -> Result<()> {
    check_len("h0", ops.lanes(), h0.len())?;
    check_len("a_bar", ops.len * ops.lanes(), ops.a_bar.len())?;
    check_len("b_bar", ops.len * ops.lanes(), ops.b_bar.len())
}

/// `h_t = Ā_t h_{t-1} + b̄_t`, evaluated in order.
pub fn scan_sequential<T: Scalar>(ops: &StepOperator<T>, h0: &[T]) -> Result<StateTrajectory<T>> {
    check_h0(ops, h0)?;
    let lanes = ops.lanes();
    let mut h = vec![T::zero(); ops.len * lanes];
    let mut prev = h0.to_vec();
    for t in 0..ops.len {
        let (a, b) = (ops.a_bar_at(t), ops.b_bar_at(t));
        let out = &mut h[t * lanes..(t + 1) * lanes];
        for i in 0..lanes {
            out[i] = a[i] * prev[i] + b[i];
        }
        prev.copy_from_slice(out);
    }
    Ok(StateTrajectory::Dense {
        len: ops.len,
        lanes,
        h,
    })
}

/// Affine map `h -> a h + b` of a single lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinePair<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> Monoid for AffinePair<T> {
    fn identity() -> Self {
        AffinePair {
            a: T::one(),
            b: T::zero(),
        }
    }

    #[inline]
    fn compose(p2: Self, p1: Self) -> Self {
        AffinePair {
            a: p2.a * p1.a,
            b: p2.a * p1.b + p2.b,
        }
    }
}

impl<T: Scalar> AffinePair<T> {
    #[inline]
    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

/// Same result as [`scan_sequential`], computed as a tree prefix scan of
/// affine pairs inside each chunk; only the state crosses chunk boundaries.
pub fn scan_chunked<T: Scalar>(
    ops: &StepOperator<T>,
    h0: &[T],
    chunk: usize,
) -> Result<StateTrajectory<T>> {
    if chunk == 0 {
        return Err(PgfError::Invalid("chunk size must be >= 1".into()));
    }
    check_h0(ops, h0)?;
    let lanes = ops.lanes();
    let mut h = vec![T::zero(); ops.len * lanes];
    let mut carry = h0.to_vec();
    let mut pairs = Vec::with_capacity(chunk);
    let mut start = 0;
    while start < ops.len {
        let end = (start + chunk).min(ops.len);
        for lane in 0..lanes {
            pairs.clear();
            pairs.extend((start..end).map(|t| AffinePair {
                a: ops.a_bar[t * lanes + lane],
                b: ops.b_bar[t * lanes + lane],
            }));
            inclusive_scan_tree(&mut pairs);
            for (i, p) in pairs.iter().enumerate() {
                h[(start + i) * lanes + lane] = p.apply(carry[lane]);
            }
            carry[lane] = h[(end - 1) * lanes + lane];
        }
        start = end;
    }
    Ok(StateTrajectory::Dense {
        len: ops.len,
        lanes,
        h,
    })
}

/// Returns `(y_t, ŷ_t)` with `ŷ_t[d] = Σ_n C[d,n] h_t[d,n] + D_res[d] u_t[d]`
/// and `y_t = σ(ŷ_t)`.
pub fn output_map<T: Scalar>(params: &GlrParams<T>, h_t: &[T], u_t: &[T]) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); params.d];
    let mut y_hat = vec![T::zero(); params.d];
    output_map_into(params, h_t, u_t, &mut y, &mut y_hat);
    (y, y_hat)
}

pub(crate) fn output_map_into<T: Scalar>(
    params: &GlrParams<T>,
    h_t: &[T],
    u_t: &[T],
    y: &mut [T],
    y_hat: &mut [T],
) {
    let n = params.n;
    for d in 0..params.d {
        let row = d * n..(d + 1) * n;
        let ch: T = params.c_weight[row.clone()]
            .iter()
            .zip(&h_t[row])
            .map(|(&c, &h)| c * h)
            .sum();
        y_hat[d] = ch + params.d_res[d] * u_t[d];
        y[d] = params.activation.eval(y_hat[d]);
    }
}

/// Full primal sequence map `u -> y` from `h0 = 0`.
pub fn forward<T: Scalar>(params: &GlrParams<T>, u: &[T]) -> Result<Vec<T>> {
    let ops = discretize(params, u)?;
    let traj = scan_sequential(&ops, &vec![T::zero(); params.lanes()])?;
    let h = traj.states().expect("dense trajectory");
    let (d, lanes) = (params.d, params.lanes());
    let mut y = vec![T::zero(); u.len()];
    let mut y_hat = vec![T::zero(); d];
    for t in 0..ops.len {
        output_map_into(
            params,
            &h[t * lanes..(t + 1) * lanes],
            &u[t * d..(t + 1) * d],
            &mut y[t * d..(t + 1) * d],
            &mut y_hat,
        );
    }
    Ok(y)
}
