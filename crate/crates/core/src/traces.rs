//! Packet traces: the data model the defense transforms, text ingestion,
//! corpus statistics and synthetic corpus generation.
//!
//! A trace file holds one packet per line as `<timestamp>\t<signed-size>`,
//! where the sign of the size encodes the direction (positive is outgoing,
//! client to bridge). Padded traces may carry an optional third column
//! `R`, `D` or `C` marking real, dummy and control packets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: timestamp goes backwards")]
    NonMonotonicTime { line: usize },
    #[error("trace contains no packets")]
    EmptyTrace,
    #[error("need at least {needed} packets, found {found}")]
    TooFewEvents { needed: usize, found: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Client to bridge.
    Outgoing,
    /// Bridge to client.
    Incoming,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Outgoing => 1,
            Direction::Incoming => -1,
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::Outgoing => Direction::Incoming,
            Direction::Incoming => Direction::Outgoing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    Real,
    Dummy,
    Control,
}

impl PacketKind {
    fn tag(self) -> char {
        match self {
            PacketKind::Real => 'R',
            PacketKind::Dummy => 'D',
            PacketKind::Control => 'C',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub time: f64,
    pub direction: Direction,
    pub size: u32,
    pub kind: PacketKind,
}

impl PacketEvent {
    pub fn real(time: f64, direction: Direction, size: u32) -> Self {
        PacketEvent { time, direction, size, kind: PacketKind::Real }
    }

    pub fn is_real(&self) -> bool {
        self.kind == PacketKind::Real
    }
}

/// Which packets of a trace an operation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionFilter {
    Both,
    Only(Direction),
}

impl DirectionFilter {
    fn admits(self, d: Direction) -> bool {
        match self {
            DirectionFilter::Both => true,
            DirectionFilter::Only(only) => only == d,
        }
    }
}

/// A time-ordered packet sequence for one page load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    events: Vec<PacketEvent>,
    label: String,
}

impl Trace {
    /// Builds a trace, checking the packet invariants and time ordering.
    pub fn new(label: impl Into<String>, events: Vec<PacketEvent>) -> Result<Self, TraceError> {
        for (i, ev) in events.iter().enumerate() {
            if ev.size == 0 {
                return Err(TraceError::InvalidParams(format!("packet {i} has zero size")));
            }
            if !(ev.time >= 0.0) || !ev.time.is_finite() {
                return Err(TraceError::InvalidParams(format!("packet {i} has invalid time {}", ev.time)));
            }
            if ev.kind == PacketKind::Control && ev.direction != Direction::Outgoing {
                return Err(TraceError::InvalidParams(format!("packet {i}: control packets flow client to bridge")));
            }
            if i > 0 && ev.time < events[i - 1].time {
                return Err(TraceError::NonMonotonicTime { line: i + 1 });
            }
        }
        Ok(Trace { events, label: label.into() })
    }

    pub fn events(&self) -> &[PacketEvent] {
        &self.events
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// The sub-trace of packets travelling in `direction`.
    pub fn filter_direction(&self, direction: Direction) -> Trace {
        Trace {
            events: self.events.iter().copied().filter(|e| e.direction == direction).collect(),
            label: self.label.clone(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| u64::from(e.size)).sum()
    }

    /// Time between the first and the last packet.
    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(first), Some(last)) => last.time - first.time,
            _ => 0.0,
        }
    }

    /// Serializes in the trace file format. With `annotate` a third column
    /// records the packet kind.
    pub fn to_text(&self, annotate: bool) -> String {
        let mut out = String::with_capacity(self.events.len() * 20);
        for ev in &self.events {
            let signed = ev.direction.sign() * i64::from(ev.size);
            write!(out, "{:.6}\t{:+}", ev.time, signed).unwrap();
            if annotate {
                write!(out, "\t{}", ev.kind.tag()).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Parses a raw trace. Every packet is marked real.
pub fn parse_trace(text: &str, label: &str) -> Result<Trace, TraceError> {
    parse_lines(text, label, false)
}

/// Parses a trace that may carry the `R|D|C` kind column written by
/// [`Trace::to_text`] with annotation enabled.
pub fn parse_annotated_trace(text: &str, label: &str) -> Result<Trace, TraceError> {
    parse_lines(text, label, true)
}

fn parse_lines(text: &str, label: &str, allow_kind: bool) -> Result<Trace, TraceError> {
    let mut events = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let malformed = |reason: &str| TraceError::MalformedLine { line, reason: reason.to_string() };
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let max_tokens = if allow_kind { 3 } else { 2 };
        if tokens.len() < 2 || tokens.len() > max_tokens {
            return Err(malformed(&format!("expected {max_tokens} fields, found {}", tokens.len())));
        }
        let time: f64 = tokens[0].parse().map_err(|_| malformed("bad timestamp"))?;
        if !time.is_finite() || time < 0.0 {
            return Err(malformed("timestamp must be a non-negative decimal"));
        }
        let signed: i64 = tokens[1].parse().map_err(|_| malformed("bad packet size"))?;
        if signed == 0 {
            return Err(malformed("packet size must be non-zero"));
        }
        let size = u32::try_from(signed.unsigned_abs()).map_err(|_| malformed("packet size too large"))?;
        let direction = if signed > 0 { Direction::Outgoing } else { Direction::Incoming };
        let kind = match tokens.get(2) {
            None | Some(&"R") => PacketKind::Real,
            Some(&"D") => PacketKind::Dummy,
            Some(&"C") => PacketKind::Control,
            Some(_) => return Err(malformed("kind must be R, D or C")),
        };
        if time < last_time {
            return Err(TraceError::NonMonotonicTime { line });
        }
        last_time = time;
        events.push(PacketEvent { time, direction, size, kind });
    }
    if events.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Trace::new(label, events)
}

/// Consecutive time differences of the packets admitted by `filter`.
pub fn interarrival_times(trace: &Trace, filter: DirectionFilter) -> Result<Vec<f64>, TraceError> {
    let times: Vec<f64> = trace.events.iter().filter(|e| filter.admits(e.direction)).map(|e| e.time).collect();
    if times.len() < 2 {
        return Err(TraceError::TooFewEvents { needed: 2, found: times.len() });
    }
    Ok(times.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Bytes per second over each run of `window` consecutive packets, keyed by
/// the index of the window's first inter-arrival gap. A window spanning zero
/// time has infinite bandwidth.
pub fn instantaneous_bandwidth(trace: &Trace, window: usize) -> Result<Vec<(usize, f64)>, TraceError> {
    if window < 2 {
        return Err(TraceError::InvalidParams(format!("window must be at least 2, got {window}")));
    }
    if trace.len() < window {
        return Err(TraceError::TooFewEvents { needed: window, found: trace.len() });
    }
    Ok(trace
        .events
        .windows(window)
        .enumerate()
        .map(|(i, w)| {
            let bytes: f64 = w.iter().map(|e| f64::from(e.size)).sum();
            let span = w[window - 1].time - w[0].time;
            let bw = if span > 0.0 { bytes / span } else { f64::INFINITY };
            (i, bw)
        })
        .collect())
}

/// Overlays `b`, delayed by `offset` seconds, onto `a`. On equal timestamps
/// packets of `a` come first. The result keeps `a`'s label.
pub fn merge_traces(a: &Trace, b: &Trace, offset: f64) -> Result<Trace, TraceError> {
    if !(offset >= 0.0) || !offset.is_finite() {
        return Err(TraceError::InvalidParams(format!("offset must be non-negative, got {offset}")));
    }
    let mut merged = Vec::with_capacity(a.len() + b.len());
    let mut left = a.events.iter().peekable();
    let mut right = b.events.iter().map(|e| PacketEvent { time: e.time + offset, ..*e }).peekable();
    loop {
        match (left.peek(), right.peek()) {
            (Some(l), Some(r)) => {
                if r.time < l.time {
                    merged.push(right.next().unwrap());
                } else {
                    merged.push(*left.next().unwrap());
                }
            }
            (Some(_), None) => merged.push(*left.next().unwrap()),
            (None, Some(_)) => merged.push(right.next().unwrap()),
            (None, None) => break,
        }
    }
    Trace::new(a.label.clone(), merged)
}

/// A labeled collection of traces.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub traces: Vec<Trace>,
    pub metadata: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(traces: Vec<Trace>) -> Result<Self, TraceError> {
        if traces.is_empty() {
            return Err(TraceError::InvalidParams("corpus must contain at least one trace".into()));
        }
        if traces.iter().any(Trace::is_empty) {
            return Err(TraceError::EmptyTrace);
        }
        Ok(Corpus { traces, metadata: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for t in &self.traces {
            if !seen.iter().any(|l| l == t.label()) {
                seen.push(t.label().to_string());
            }
        }
        seen
    }

    /// Per-trace instance numbers: the position of each trace among the
    /// traces sharing its label.
    pub fn instance_numbers(&self) -> Vec<usize> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        self.traces
            .iter()
            .map(|t| {
                let c = counts.entry(t.label()).or_insert(0);
                let n = *c;
                *c += 1;
                n
            })
            .collect()
    }
}

/// Shape of the synthetic page-load generator.
///
/// Each page gets a latent signature: a number of request/response rounds,
/// a response length per round, an outgoing request size and a time scale
/// for the pauses between rounds. Instances of a page perturb the signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub min_rounds: usize,
    pub max_rounds: usize,
    /// Range of mean incoming cells per response.
    pub response_cells: (f64, f64),
    /// Range of the page's pause between rounds, seconds.
    pub pause_scale: (f64, f64),
    /// Range of the page's mean spacing inside a response, seconds.
    pub cell_spacing: (f64, f64),
    /// Range of the request-to-first-response delay, seconds.
    pub rtt: (f64, f64),
    /// Relative per-instance jitter on response lengths.
    pub length_jitter: f64,
    /// Log-scale standard deviation of per-instance pause jitter.
    pub pause_jitter: f64,
    pub cell_size: u32,
    pub label_prefix: String,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            min_rounds: 4,
            max_rounds: 14,
            response_cells: (3.0, 40.0),
            pause_scale: (0.05, 0.6),
            cell_spacing: (0.0005, 0.004),
            rtt: (0.02, 0.12),
            length_jitter: 0.2,
            pause_jitter: 0.35,
            cell_size: 1500,
            label_prefix: "page".to_string(),
        }
    }
}

struct PageSignature {
    responses: Vec<f64>,
    requests: Vec<u32>,
    request_size: u32,
    pause: f64,
    spacing: f64,
    rtt: f64,
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

impl PageSignature {
    fn draw<R: Rng>(rng: &mut R, p: &SynthParams) -> Self {
        let rounds = rng.random_range(p.min_rounds..=p.max_rounds);
        let responses = (0..rounds).map(|_| log_uniform(rng, p.response_cells)).collect();
        let requests = (0..rounds).map(|_| rng.random_range(1..=3)).collect();
        PageSignature {
            responses,
            requests,
            request_size: rng.random_range(200..=900),
            pause: log_uniform(rng, p.pause_scale),
            spacing: log_uniform(rng, p.cell_spacing),
            rtt: log_uniform(rng, p.rtt),
        }
    }

    fn instance<R: Rng>(&self, rng: &mut R, p: &SynthParams, label: &str) -> Trace {
        let pause_dist = LogNormal::new(self.pause.ln(), p.pause_jitter).expect("valid pause distribution");
        let spacing_dist = Exp::new(1.0 / self.spacing).expect("valid spacing distribution");
        let out_spacing = Exp::new(1.0 / (self.spacing * 2.0)).expect("valid spacing distribution");
        let mut t = 0.0f64;
        let mut events = Vec::new();
        for (round, (&mean_cells, &requests)) in self.responses.iter().zip(&self.requests).enumerate() {
            if round > 0 {
                t += pause_dist.sample(rng);
            }
            for r in 0..requests {
                if r > 0 {
                    t += out_spacing.sample(rng);
                }
                events.push(PacketEvent::real(t, Direction::Outgoing, self.request_size));
            }
            t += self.rtt * rng.random_range(0.8..1.25);
            let jitter = rng.random_range(1.0 - p.length_jitter..=1.0 + p.length_jitter);
            let cells = ((mean_cells * jitter).round() as usize).max(1);
            for c in 0..cells {
                if c > 0 {
                    t += spacing_dist.sample(rng);
                }
                events.push(PacketEvent::real(t, Direction::Incoming, p.cell_size));
            }
        }
        Trace::new(label, events).expect("generator produces ordered traces")
    }
}

/// Generates `pages * instances` traces, deterministically for a given seed.
/// Traces are ordered by page, then instance.
pub fn synth_corpus(pages: usize, instances: usize, params: &SynthParams, seed: u64) -> Result<Corpus, TraceError> {
    if pages < 2 || instances < 1 {
        return Err(TraceError::InvalidParams(format!(
            "need at least 2 pages and 1 instance, got {pages} x {instances}"
        )));
    }
    if params.min_rounds == 0 || params.min_rounds > params.max_rounds {
        return Err(TraceError::InvalidParams("round range must satisfy 1 <= min <= max".into()));
    }
    let positive = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
    if !positive(params.response_cells)
        || !positive(params.pause_scale)
        || !positive(params.cell_spacing)
        || !positive(params.rtt)
    {
        return Err(TraceError::InvalidParams("ranges must be positive and ordered".into()));
    }
    if !(0.0..1.0).contains(&params.length_jitter) || !(params.pause_jitter > 0.0) || params.cell_size == 0 {
        return Err(TraceError::InvalidParams("jitter must lie in [0, 1), pause jitter and cell size positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(pages * instances);
    for page in 0..pages {
        let label = format!("{}{:03}", params.label_prefix, page);
        let signature = PageSignature::draw(&mut rng, params);
        for _ in 0..instances {
            traces.push(signature.instance(&mut rng, params, &label));
        }
    }
    let mut corpus = Corpus::new(traces)?;
    corpus.metadata.insert("source".into(), "synthetic".into());
    corpus.metadata.insert("seed".into(), seed.to_string());
    corpus.metadata.insert("pages".into(), pages.to_string());
    corpus.metadata.insert("instances".into(), instances.to_string());
    Ok(corpus)
}
