//! Constant-rate reference defenses: BuFLO and Tamaraw.
//!
//! Both send fixed-size cells on a fixed schedule. Real data is queued FIFO
//! per direction and rides the first slot at or after its arrival, which
//! is where their latency cost comes from.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::{Direction, PacketEvent, PacketKind, Trace, TraceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufloParams {
    /// Minimum padding duration, seconds.
    pub tau: f64,
    /// Seconds between cells.
    pub rho: f64,
    /// Cell size, bytes.
    pub cell_size: u32,
}

impl Default for BufloParams {
    fn default() -> Self {
        BufloParams { tau: 10.0, rho: 0.020, cell_size: 1500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamarawParams {
    /// Seconds between outgoing cells.
    pub rho_out: f64,
    /// Seconds between incoming cells.
    pub rho_in: f64,
    pub cell_size: u32,
    /// Each direction sends a multiple of this many cells.
    pub pad_multiple: u32,
}

impl Default for TamarawParams {
    fn default() -> Self {
        TamarawParams { rho_out: 0.053, rho_in: 0.138, cell_size: 1500, pad_multiple: 100 }
    }
}

fn positive(name: &str, v: f64) -> Result<(), BaselineError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(BaselineError::InvalidParams(format!("{name} must be positive, got {v}")))
    }
}

/// Slot schedule of one direction: which slots carry real cells.
struct Schedule {
    start: f64,
    period: f64,
    real_slots: Vec<u64>,
}

impl Schedule {
    fn slot_time(&self, k: u64) -> f64 {
        self.start + k as f64 * self.period
    }

    /// First slot whose time is at or after `t`.
    fn first_slot_at_or_after(&self, t: f64) -> u64 {
        let mut k = ((t - self.start) / self.period).ceil().max(0.0) as u64;
        while k > 0 && self.slot_time(k - 1) >= t {
            k -= 1;
        }
        while self.slot_time(k) < t {
            k += 1;
        }
        k
    }

    fn build(trace: &Trace, direction: Direction, start: f64, period: f64, cell_size: u32) -> Schedule {
        let mut s = Schedule { start, period, real_slots: Vec::new() };
        let mut next_free = 0u64;
        for ev in trace.events().iter().filter(|e| e.direction == direction) {
            let cells = ev.size.div_ceil(cell_size).max(1);
            let mut k = next_free.max(s.first_slot_at_or_after(ev.time));
            for _ in 0..cells {
                s.real_slots.push(k);
                k += 1;
            }
            next_free = k;
        }
        s
    }

    /// Slots used up to and including the last real cell.
    fn used(&self) -> u64 {
        self.real_slots.last().map_or(0, |&k| k + 1)
    }

    fn emit(&self, direction: Direction, slots: u64, cell_size: u32, out: &mut Vec<PacketEvent>) {
        let mut real = self.real_slots.iter().peekable();
        for k in 0..slots {
            let kind = if real.next_if_eq(&&k).is_some() { PacketKind::Real } else { PacketKind::Dummy };
            out.push(PacketEvent { time: self.slot_time(k), direction, size: cell_size, kind });
        }
    }
}

fn finish(label: &str, mut events: Vec<PacketEvent>) -> Result<Trace, BaselineError> {
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.direction.cmp(&b.direction)));
    Ok(Trace::new(label, events)?)
}

/// BuFLO: both directions send one cell every `rho` from the first packet
/// until all real data is out and at least `tau` has passed.
pub fn buflo(trace: &Trace, params: &BufloParams) -> Result<Trace, BaselineError> {
    positive("tau", params.tau)?;
    positive("rho", params.rho)?;
    if params.cell_size == 0 {
        return Err(BaselineError::InvalidParams("cell size must be positive".into()));
    }
    let start = trace.events().first().ok_or(BaselineError::EmptyTrace)?.time;
    let dirs = [Direction::Outgoing, Direction::Incoming];
    let schedules = dirs.map(|d| Schedule::build(trace, d, start, params.rho, params.cell_size));
    let delivered = schedules.iter().filter_map(|s| s.real_slots.last().map(|&k| s.slot_time(k))).fold(start, f64::max);
    let end = delivered.max(start + params.tau);
    let mut events = Vec::new();
    for (s, d) in schedules.iter().zip(dirs) {
        let last = s.first_slot_at_or_after(end);
        s.emit(d, last + 1, params.cell_size, &mut events);
    }
    finish(trace.label(), events)
}

/// Tamaraw: each direction sends at its own rate and keeps going after its
/// last real cell until its cell count is a multiple of `pad_multiple`.
pub fn tamaraw(trace: &Trace, params: &TamarawParams) -> Result<Trace, BaselineError> {
    positive("rho_out", params.rho_out)?;
    positive("rho_in", params.rho_in)?;
    if params.cell_size == 0 || params.pad_multiple == 0 {
        return Err(BaselineError::InvalidParams("cell size and padding multiple must be positive".into()));
    }
    let start = trace.events().first().ok_or(BaselineError::EmptyTrace)?.time;
    let multiple = u64::from(params.pad_multiple);
    let mut events = Vec::new();
    for (d, rho) in [(Direction::Outgoing, params.rho_out), (Direction::Incoming, params.rho_in)] {
        let s = Schedule::build(trace, d, start, rho, params.cell_size);
        let total = s.used().div_ceil(multiple) * multiple;
        s.emit(d, total, params.cell_size, &mut events);
    }
    finish(trace.label(), events)
}
