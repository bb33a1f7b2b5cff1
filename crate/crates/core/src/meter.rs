//! Logical allocation meter.
//!
//! Strategies register the buffers they hold under a [`MemClass`]; the meter
//! keeps live and peak byte counts per class and in total. It meters logical
//! registrations, not allocator internals, so two runs that retain the same
//! buffers report byte-identical peaks.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{PgfError, Result};
use crate::numerics::{ols_slope_test, RegressionReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemClass {
    /// Differentiation-specific retained state (tiles, trajectories, flows).
    Graph,
    /// Input/output payload that any evaluator has to hold.
    Io,
    /// Gradient accumulators.
    Accumulator,
}

impl MemClass {
    pub const ALL: [MemClass; 3] = [MemClass::Graph, MemClass::Io, MemClass::Accumulator];

    fn idx(self) -> usize {
        match self {
            MemClass::Graph => 0,
            MemClass::Io => 1,
            MemClass::Accumulator => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemClass::Graph => "graph",
            MemClass::Io => "io",
            MemClass::Accumulator => "accumulator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterOp {
    Track,
    Release,
}

/// One ledger entry. `seq` is a logical clock so exported logs are reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeterEvent {
    pub seq: u64,
    pub op: MeterOp,
    pub class: MemClass,
    pub bytes: usize,
    pub live: usize,
    pub peak: usize,
}

#[derive(Debug, Default, Clone)]
struct Ledger {
    live: [usize; 3],
    peak: [usize; 3],
    live_total: usize,
    peak_total: usize,
    clock: u64,
    log: Option<Vec<MeterEvent>>,
}

/// Snapshot of the meter counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub live_graph: usize,
    pub live_io: usize,
    pub live_accumulator: usize,
    pub peak_graph: usize,
    pub peak_io: usize,
    pub peak_accumulator: usize,
    pub peak_total: usize,
}

#[derive(Debug, Default)]
pub struct MemoryMeter {
    ledger: RefCell<Ledger>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// A meter that additionally records every track/release event.
    pub fn with_event_log() -> Self {
        let meter = Self::default();
        meter.ledger.borrow_mut().log = Some(Vec::new());
        meter
    }

    pub fn track(&self, class: MemClass, bytes: usize) -> Result<()> {
        if bytes == 0 {
            return Ok(());
        }
        let mut l = self.ledger.borrow_mut();
        let i = class.idx();
        l.live[i] += bytes;
        l.peak[i] = l.peak[i].max(l.live[i]);
        l.live_total += bytes;
        l.peak_total = l.peak_total.max(l.live_total);
        l.clock += 1;
        let ev = MeterEvent {
            seq: l.clock,
            op: MeterOp::Track,
            class,
            bytes,
            live: l.live[i],
            peak: l.peak[i],
        };
        if let Some(log) = l.log.as_mut() {
            log.push(ev);
        }
        Ok(())
    }

    pub fn release(&self, class: MemClass, bytes: usize) -> Result<()> {
        if bytes == 0 {
            return Ok(());
        }
        let mut l = self.ledger.borrow_mut();
        let i = class.idx();
        if bytes > l.live[i] {
            return Err(PgfError::UnbalancedRelease {
                class,
                bytes,
                live: l.live[i],
            });
        }
        l.live[i] -= bytes;
        l.live_total -= bytes;
        l.clock += 1;
        let ev = MeterEvent {
            seq: l.clock,
            op: MeterOp::Release,
            class,
            bytes,
            live: l.live[i],
            peak: l.peak[i],
        };
        if let Some(log) = l.log.as_mut() {
            log.push(ev);
        }
        Ok(())
    }

    /// Allocates a buffer of `len` copies of `fill` registered under `class`.
    /// The registration is released when the returned guard drops.
    pub fn alloc<T: Clone>(&self, class: MemClass, len: usize, fill: T) -> Tracked<'_, T> {
        self.adopt(class, vec![fill; len])
    }

    /// Registers an existing buffer.
    pub fn adopt<T>(&self, class: MemClass, data: Vec<T>) -> Tracked<'_, T> {
        let bytes = std::mem::size_of_val(data.as_slice());
        self.track(class, bytes).expect("track never fails");
        Tracked {
            data,
            bytes,
            class,
            meter: self,
        }
    }

    pub fn live(&self, class: MemClass) -> usize {
        self.ledger.borrow().live[class.idx()]
    }

    pub fn peak(&self, class: MemClass) -> usize {
        self.ledger.borrow().peak[class.idx()]
    }

    pub fn live_total(&self) -> usize {
        self.ledger.borrow().live_total
    }

    pub fn peak_total(&self) -> usize {
        self.ledger.borrow().peak_total
    }

    pub fn is_balanced(&self) -> bool {
        self.ledger.borrow().live_total == 0
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        let l = self.ledger.borrow();
        MeterSnapshot {
            live_graph: l.live[0],
            live_io: l.live[1],
            live_accumulator: l.live[2],
            peak_graph: l.peak[0],
            peak_io: l.peak[1],
            peak_accumulator: l.peak[2],
            peak_total: l.peak_total,
        }
    }

    pub fn events(&self) -> Vec<MeterEvent> {
        self.ledger.borrow().log.clone().unwrap_or_default()
    }

    /// Event log as CSV: `timestamp,op,class,bytes,live,peak`.
    pub fn events_csv(&self) -> String {
        let mut out = String::from("timestamp,op,class,bytes,live,peak\n");
        for ev in self.events() {
            let op = match ev.op {
                MeterOp::Track => "track",
                MeterOp::Release => "release",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                ev.seq,
                op,
                ev.class.name(),
                ev.bytes,
                ev.live,
                ev.peak
            );
        }
        out
    }
}

/// A metered buffer; releases its registration on drop.
pub struct Tracked<'m, T> {
    data: Vec<T>,
    bytes: usize,
    class: MemClass,
    meter: &'m MemoryMeter,
}

impl<T> Tracked<'_, T> {
    pub fn class(&self) -> MemClass {
        self.class
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl<T> Deref for Tracked<'_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Tracked<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> Drop for Tracked<'_, T> {
    fn drop(&mut self) {
        self.meter
            .release(self.class, self.bytes)
            .expect("tracked buffer released twice");
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tracked<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracked")
            .field("class", &self.class)
            .field("bytes", &self.bytes)
            .finish()
    }
}

/// OLS of peak bytes against sequence length.
pub fn slope_report(runs: &[(usize, usize)]) -> Result<RegressionReport> {
    if runs.len() < 3 {
        return Err(PgfError::DegenerateRegression(runs.len()));
    }
    let xs: Vec<f64> = runs.iter().map(|&(l, _)| l as f64).collect();
    let ys: Vec<f64> = runs.iter().map(|&(_, p)| p as f64).collect();
    ols_slope_test(&xs, &ys)
}
