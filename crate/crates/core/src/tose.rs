//! Tiled streaming evaluation.
//!
//! The sequence is cut into blocks of `B` steps. For each block the engine
//! loads the input slice, builds that block's step and augmented operators,
//! evolves the dual state, emits `(y, ∇y)` and drops everything except the
//! final dual state. The graph-class working set therefore depends on
//! `(B, D, N)` only.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, PgfError, Result};
use crate::glr::GlrParams;
use crate::meter::{MemClass, MemoryMeter, Tracked};
use crate::sample::normal_row;
use crate::scalar::Scalar;
use crate::tangent::{evolve_block, DualState, ScanStrategy};

pub const DEFAULT_BLOCK: usize = 256;

/// Partition of `[0, L)` into consecutive blocks; the last may be short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub len: usize,
    pub block: usize,
}

impl BlockPlan {
    pub fn new(len: usize, block: usize) -> Result<Self> {
        if block == 0 {
            return Err(PgfError::Invalid("block size must be >= 1".into()));
        }
        if len == 0 {
            return Err(PgfError::Invalid("sequence length must be >= 1".into()));
        }
        Ok(BlockPlan { len, block })
    }

    pub fn with_default_block(len: usize) -> Result<Self> {
        Self::new(len, DEFAULT_BLOCK)
    }

    pub fn n_blocks(&self) -> usize {
        self.len.div_ceil(self.block)
    }

    /// Half-open step range of block `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let start = k * self.block;
        start..(start + self.block).min(self.len)
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n_blocks()).map(|k| self.range(k))
    }
}

/// Yields `(u, ∇u)` slices in block order.
pub trait StreamSource<T> {
    /// Channels per step.
    fn width(&self) -> usize;

    /// Fills `u` and `du` (each `steps x width`) starting at step `start`.
    /// Returns the number of steps actually written.
    fn load(&mut self, start: usize, u: &mut [T], du: &mut [T]) -> Result<usize>;
}

/// Consumes `(y, ∇y)` slices in block order.
pub trait StreamSink<T> {
    fn consume(&mut self, start: usize, y: &[T], dy: &[T]) -> Result<()>;
}

/// Source over in-memory tensors, registered as IO payload.
pub struct MemorySource<'m, T> {
    width: usize,
    u: Tracked<'m, T>,
    du: Tracked<'m, T>,
}

impl<'m, T: Scalar> MemorySource<'m, T> {
    pub fn new(meter: &'m MemoryMeter, width: usize, u: Vec<T>, du: Vec<T>) -> Result<Self> {
        check_len("du", u.len(), du.len())?;
        if width == 0 || u.len() % width != 0 {
            return Err(PgfError::Shape {
                what: "memory source (L x D)",
                expected: width,
                got: u.len(),
            });
        }
        Ok(MemorySource {
            width,
            u: meter.adopt(MemClass::Io, u),
            du: meter.adopt(MemClass::Io, du),
        })
    }

    pub fn len(&self) -> usize {
        self.u.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

impl<T: Scalar> StreamSource<T> for MemorySource<'_, T> {
    fn width(&self) -> usize {
        self.width
    }

    fn load(&mut self, start: usize, u: &mut [T], du: &mut [T]) -> Result<usize> {
        let from = (start * self.width).min(self.u.len());
        let take = u.len().min(self.u.len() - from);
        u[..take].copy_from_slice(&self.u[from..from + take]);
        du[..take].copy_from_slice(&self.du[from..from + take]);
        Ok(take / self.width)
    }
}

/// Generates inputs on demand; holds no payload.
///
/// Step `t` of `u` is a standard normal row drawn from stream `(seed, t)`;
/// `∇u` comes from the supplied closure.
pub struct GeneratedSource<F> {
    width: usize,
    len: usize,
    seed: u64,
    direction: F,
}

impl<F> GeneratedSource<F> {
    pub fn new(width: usize, len: usize, seed: u64, direction: F) -> Self {
        GeneratedSource {
            width,
            len,
            seed,
            direction,
        }
    }
}

/// Gaussian input row `t` as produced by [`GeneratedSource`].
pub fn generated_input_row<T: Scalar>(seed: u64, t: usize, out: &mut [T]) {
    normal_row(seed, 1, t as u64, out);
}

/// Gaussian direction row `t`, independent of the input rows.
pub fn generated_direction_row<T: Scalar>(seed: u64, t: usize, out: &mut [T]) {
    normal_row(seed, 2, t as u64, out);
}

impl<T: Scalar, F: FnMut(usize, &mut [T])> StreamSource<T> for GeneratedSource<F> {
    fn width(&self) -> usize {
        self.width
    }

    fn load(&mut self, start: usize, u: &mut [T], du: &mut [T]) -> Result<usize> {
        let w = self.width;
        let steps = (u.len() / w).min(self.len.saturating_sub(start));
        for i in 0..steps {
            let t = start + i;
            generated_input_row(self.seed, t, &mut u[i * w..(i + 1) * w]);
            (self.direction)(t, &mut du[i * w..(i + 1) * w]);
        }
        Ok(steps)
    }
}

/// Drops every slice.
#[derive(Debug, Default, Clone, Copy)]
pub struct DiscardSink;

impl<T> StreamSink<T> for DiscardSink {
    fn consume(&mut self, _start: usize, _y: &[T], _dy: &[T]) -> Result<()> {
        Ok(())
    }
}

/// Collects `(y, ∇y)` into tensors registered as IO payload.
pub struct MemorySink<'m, T> {
    width: usize,
    pub y: Tracked<'m, T>,
    pub dy: Tracked<'m, T>,
}

impl<'m, T: Scalar> MemorySink<'m, T> {
    pub fn new(meter: &'m MemoryMeter, len: usize, width: usize) -> Self {
        MemorySink {
            width,
            y: meter.alloc(MemClass::Io, len * width, T::zero()),
            dy: meter.alloc(MemClass::Io, len * width, T::zero()),
        }
    }
}

impl<T: Scalar> StreamSink<T> for MemorySink<'_, T> {
    fn consume(&mut self, start: usize, y: &[T], dy: &[T]) -> Result<()> {
        let from = start * self.width;
        check_len("sink capacity", self.y.len().max(from + y.len()), self.y.len())?;
        self.y[from..from + y.len()].copy_from_slice(y);
        self.dy[from..from + dy.len()].copy_from_slice(dy);
        Ok(())
    }
}

/// Adapts a closure into a sink.
pub struct FnSink<F>(pub F);

impl<T, F: FnMut(usize, &[T], &[T]) -> Result<()>> StreamSink<T> for FnSink<F> {
    fn consume(&mut self, start: usize, y: &[T], dy: &[T]) -> Result<()> {
        (self.0)(start, y, dy)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToseOptions<T> {
    pub strategy: ScanStrategy,
    /// Initial dual state; zeros when `None`.
    pub h0: Option<DualState<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub len: usize,
    pub n_blocks: usize,
    pub peak_graph_bytes: usize,
    pub peak_total_bytes: usize,
    /// Wall time per block in seconds.
    pub block_seconds: Vec<f64>,
}

/// Detaches a dual state from the block that produced it: the result owns
/// fresh buffers, so the block's buffers can be reclaimed.
pub fn handoff<T: Scalar>(state: &DualState<T>) -> DualState<T> {
    DualState {
        d: state.d,
        n: state.n,
        h: state.h.to_vec(),
        dh: state.dh.to_vec(),
    }
}

/// Streams `(y, ∇y)` for the whole plan through `sink`.
pub fn run_tose<T, S, K>(
    params: &GlrParams<T>,
    source: &mut S,
    sink: &mut K,
    plan: &BlockPlan,
    options: &ToseOptions<T>,
    meter: &MemoryMeter,
) -> Result<(DualState<T>, RunStats)>
where
    T: Scalar,
    S: StreamSource<T> + ?Sized,
    K: StreamSink<T> + ?Sized,
{
    params.validate()?;
    let d = params.d;
    check_len("source width", d, source.width())?;
    let init = match &options.h0 {
        Some(s) => {
            check_len("h0", params.lanes(), s.h.len())?;
            check_len("dh0", params.lanes(), s.dh.len())?;
            handoff(s)
        }
        None => DualState::zeros(d, params.n),
    };
    if !init.is_finite() {
        return Err(PgfError::NonFiniteState { block: 0, step: 0 });
    }
    // the carried state lives for the whole run
    let carried_bytes = init.bytes();
    meter.track(MemClass::Graph, carried_bytes)?;
    let mut state = init;
    let mut block_seconds = Vec::with_capacity(plan.n_blocks());

    let result = (|| -> Result<()> {
        for (k, range) in plan.ranges().enumerate() {
            let started = Instant::now();
            let steps = range.len();
            {
                let g = MemClass::Graph;
                let mut u = meter.alloc(g, steps * d, T::zero());
                let mut du = meter.alloc(g, steps * d, T::zero());
                let got = source.load(range.start, &mut u, &mut du)?;
                if got < steps {
                    return Err(PgfError::SourceExhausted {
                        block: k,
                        wanted: steps,
                        got,
                    });
                }
                if let Some(i) = crate::scalar::first_non_finite(&u)
                    .or_else(|| crate::scalar::first_non_finite(&du))
                {
                    return Err(PgfError::NonFinite {
                        what: "streamed input",
                        index: range.start * d + i,
                    });
                }
                let mut y = meter.alloc(g, steps * d, T::zero());
                let mut dy = meter.alloc(g, steps * d, T::zero());
                let mut blk_state = handoff(&state);
                meter.track(g, blk_state.bytes())?;
                let evolved = evolve_block(
                    params,
                    &u,
                    &du,
                    &mut blk_state,
                    options.strategy,
                    &mut y,
                    &mut dy,
                    meter,
                    k,
                )
                .map_err(|e| match e {
                    PgfError::NonFiniteState { step, .. } => PgfError::NonFiniteState {
                        block: k,
                        step: range.start + step,
                    },
                    other => other,
                });
                if let Err(e) = evolved {
                    meter.release(g, blk_state.bytes())?;
                    return Err(e);
                }
                sink.consume(range.start, &y, &dy)?;
                state = handoff(&blk_state);
                meter.release(g, blk_state.bytes())?;
            }
            block_seconds.push(started.elapsed().as_secs_f64());
        }
        Ok(())
    })();
    meter.release(MemClass::Graph, carried_bytes)?;
    result?;

    let stats = RunStats {
        len: plan.len,
        n_blocks: plan.n_blocks(),
        peak_graph_bytes: meter.peak(MemClass::Graph),
        peak_total_bytes: meter.peak_total(),
        block_seconds,
    };
    Ok((state, stats))
}
