//! Discrete-event simulation of a padded client-bridge link.
//!
//! The recorded trace is replayed as application data: outgoing packets at
//! the client at their recorded times, incoming packets at the bridge one
//! link delay earlier so they reach the observation point on time. The
//! output is every packet crossing the link, timestamped where the
//! adversary sits, on the client side.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::padding::{Emission, Endpoint, EndpointConfig, EndpointEvent, EndpointRole, PaddingError};
use crate::traces::{Corpus, Direction, PacketEvent, PacketKind, Trace, TraceError};

/// Timer expirations allowed per simulated trace before giving up.
pub const TIMER_EVENT_CAP: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Padding(#[from] PaddingError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("input trace holds a {0:?} packet; simulation expects real traffic only")]
    NotRaw(PacketKind),
    #[error("link delay must be finite and non-negative, got {0}")]
    InvalidLink(f64),
    #[error("padding did not stop within {0} timer events")]
    SafetyCapExceeded(u64),
    #[error("padded trace lost {direction:?} real packets: expected {expected}, found {found}")]
    MissingRealEvents { direction: Direction, expected: usize, found: usize },
    #[error("trace is empty")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkModel {
    pub one_way_delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    /// Extra bytes relative to the original trace.
    pub bandwidth_overhead: f64,
    /// Extra time to the last real packet relative to the original.
    pub latency_overhead: f64,
    pub dummy_count: usize,
    pub control_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Client,
    Bridge,
}

enum Work {
    AppData { size: u32, observed_at: f64, rank: u64 },
    Deliver { packet: PacketEvent, payload: Option<Vec<u8>> },
}

struct Scheduled {
    at: f64,
    seq: u64,
    side: Side,
    work: Work,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: the heap pops the earliest time, then the earliest insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Run {
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    delay: f64,
    observed: Vec<(f64, u64, PacketEvent)>,
    next_rank: u64,
}

impl Run {
    fn schedule(&mut self, at: f64, side: Side, work: Work) {
        self.queue.push(Scheduled { at, seq: self.seq, side, work });
        self.seq += 1;
    }

    /// Records emissions from `side` at the observation point and hands
    /// them to the other endpoint. `real_observed` carries the recorded
    /// observation time and rank of the real packet being replayed, if any.
    fn emit(&mut self, side: Side, now: f64, emissions: Vec<Emission>, real_observed: Option<(f64, u64)>) {
        for Emission { mut packet, payload } in emissions {
            let (observed_at, rank) = match (packet.kind, real_observed) {
                (PacketKind::Real, Some(known)) => known,
                _ => {
                    let rank = self.next_rank;
                    self.next_rank += 1;
                    let at = match side {
                        Side::Client => now,
                        Side::Bridge => now + self.delay,
                    };
                    (at, rank)
                }
            };
            packet.time = observed_at;
            self.observed.push((observed_at, rank, packet));
            let (peer, arrival) = match side {
                Side::Client => (Side::Bridge, now + self.delay),
                Side::Bridge => (Side::Client, observed_at),
            };
            self.schedule(arrival, peer, Work::Deliver { packet, payload });
        }
    }
}

/// Runs the defense over one raw trace and returns the trace an on-link
/// observer at the client sees. Real packets keep their recorded time and
/// size; dummy and control cells have the configured cell size.
pub fn simulate(
    trace: &Trace,
    client: &EndpointConfig,
    bridge: &EndpointConfig,
    link: LinkModel,
    seed: u64,
) -> Result<Trace, SimError> {
    if !(link.one_way_delay >= 0.0) || !link.one_way_delay.is_finite() {
        return Err(SimError::InvalidLink(link.one_way_delay));
    }
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    if let Some(bad) = trace.events().iter().find(|e| !e.is_real()) {
        return Err(SimError::NotRaw(bad.kind));
    }
    let mut client = Endpoint::new(EndpointConfig { role: EndpointRole::Client, ..client.clone() });
    let mut bridge = Endpoint::new(EndpointConfig { role: EndpointRole::Bridge, ..bridge.clone() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run {
        queue: BinaryHeap::new(),
        seq: 0,
        delay: link.one_way_delay,
        observed: Vec::with_capacity(trace.len() * 2),
        next_rank: trace.len() as u64,
    };
    for (rank, ev) in trace.events().iter().enumerate() {
        let (side, at) = match ev.direction {
            Direction::Outgoing => (Side::Client, ev.time),
            Direction::Incoming => (Side::Bridge, ev.time - link.one_way_delay),
        };
        run.schedule(at, side, Work::AppData { size: ev.size, observed_at: ev.time, rank: rank as u64 });
    }

    let mut timer_events = 0u64;
    loop {
        let queued = run.queue.peek().map(|s| s.at);
        let timers = [(Side::Client, client.next_timer()), (Side::Bridge, bridge.next_timer())];
        let timer =
            timers.iter().filter_map(|(side, t)| t.map(|(at, id)| (at, *side, id))).min_by(|a, b| a.0.total_cmp(&b.0));
        let take_queue = match (queued, timer) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(q), Some((t, _, _))) => q <= t,
        };
        if take_queue {
            let Scheduled { at, side, work, .. } = run.queue.pop().expect("peeked");
            let endpoint = match side {
                Side::Client => &mut client,
                Side::Bridge => &mut bridge,
            };
            match work {
                Work::AppData { size, observed_at, rank } => {
                    let out = endpoint.handle_app_data(size, at, &mut rng)?;
                    run.emit(side, at, out, Some((observed_at, rank)));
                }
                Work::Deliver { packet, payload } => {
                    let out = endpoint.handle(
                        EndpointEvent::LinkPacket { packet, payload: payload.as_deref() },
                        at,
                        &mut rng,
                    )?;
                    run.emit(side, at, out, None);
                }
            }
        } else {
            let (at, side, id) = timer.expect("timer chosen");
            timer_events += 1;
            if timer_events > TIMER_EVENT_CAP {
                return Err(SimError::SafetyCapExceeded(TIMER_EVENT_CAP));
            }
            let endpoint = match side {
                Side::Client => &mut client,
                Side::Bridge => &mut bridge,
            };
            let out = endpoint.handle(EndpointEvent::Timer(id), at, &mut rng)?;
            run.emit(side, at, out, None);
        }
    }

    let mut observed = run.observed;
    observed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let events = observed.into_iter().map(|(_, _, p)| p).collect();
    Ok(Trace::new(trace.label(), events)?)
}

/// Simulates every trace of a corpus in parallel. Trace `i` uses seed
/// `base_seed ^ i`; output order follows input order.
pub fn simulate_corpus(
    corpus: &Corpus,
    client: &EndpointConfig,
    bridge: &EndpointConfig,
    link: LinkModel,
    base_seed: u64,
) -> Result<Corpus, SimError> {
    let traces = corpus
        .traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| simulate(t, client, bridge, link, base_seed ^ i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Corpus::new(traces)?;
    out.metadata = corpus.metadata.clone();
    out.metadata.insert("defense".into(), "wtfpad".into());
    out.metadata.insert("seed".into(), base_seed.to_string());
    Ok(out)
}

fn real_count(trace: &Trace, direction: Direction) -> usize {
    trace.events().iter().filter(|e| e.is_real() && e.direction == direction).count()
}

fn last_real_time(trace: &Trace) -> Option<f64> {
    trace.events().iter().rev().find(|e| e.is_real()).map(|e| e.time)
}

/// Bandwidth and latency cost of `padded` relative to `original`.
pub fn overheads(original: &Trace, padded: &Trace) -> Result<OverheadReport, SimError> {
    if original.is_empty() || padded.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    for direction in [Direction::Outgoing, Direction::Incoming] {
        let expected = real_count(original, direction);
        let found = real_count(padded, direction);
        if found < expected {
            return Err(SimError::MissingRealEvents { direction, expected, found });
        }
    }
    let original_bytes = original.total_bytes() as f64;
    let padded_bytes = padded.total_bytes() as f64;
    let original_last = last_real_time(original).expect("original holds real packets");
    let padded_last = last_real_time(padded).expect("padded holds real packets");
    let latency_overhead = if original_last > 0.0 {
        (padded_last - original_last) / original_last
    } else if padded_last == original_last {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(OverheadReport {
        bandwidth_overhead: (padded_bytes - original_bytes) / original_bytes,
        latency_overhead,
        dummy_count: padded.events().iter().filter(|e| e.kind == PacketKind::Dummy).count(),
        control_count: padded.events().iter().filter(|e| e.kind == PacketKind::Control).count(),
    })
}

/// Per-trace overheads of a padded corpus against its source, pairing
/// traces by position.
pub fn corpus_overheads(original: &Corpus, padded: &Corpus) -> Result<Vec<OverheadReport>, SimError> {
    if original.len() != padded.len() {
        return Err(SimError::Trace(TraceError::InvalidParams(format!(
            "corpus sizes differ: {} vs {}",
            original.len(),
            padded.len()
        ))));
    }
    original.traces.iter().zip(&padded.traces).map(|(o, p)| overheads(o, p)).collect()
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}
