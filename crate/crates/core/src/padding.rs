//! The adaptive padding state machine and the two-machine endpoint built
//! on it.
//!
//! A machine idles in [`Mode::Idle`] until its trigger arrives, then counts
//! down delays drawn from its burst histogram. When a countdown expires it
//! sends a dummy and switches to gap mode, emitting a fake burst paced by
//! its gap histogram until an infinity draw returns it to burst mode. An
//! infinity draw in burst mode returns it to idle.
//!
//! Real data is never delayed: every action returned for a real packet is
//! to send it now.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histograms::{Delay, HistogramError, HistogramSet, TokenHistogram};
use crate::traces::{Direction, PacketEvent, PacketKind};

/// Default cell size in bytes.
pub const DEFAULT_CELL_SIZE: u32 = 1500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaddingError {
    #[error("{event:?} is not valid in {mode:?} mode")]
    InvalidTransition { mode: Mode, event: MachineEvent },
    #[error("event at {now} precedes the previous event at {last}")]
    ClockRegression { now: f64, last: f64 },
    #[error("control payload needs {needed} bytes but a cell holds {cell}")]
    PayloadTooLarge { needed: usize, cell: usize },
    #[error("malformed control payload: {0}")]
    MalformedControl(String),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Burst,
    Gap,
}

/// Whether a machine reacts to local application data or to packets from
/// the peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MachineRole {
    Send,
    Receive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MachineEvent {
    /// Application data ready to send.
    PushReal,
    /// A packet arrived from the peer.
    Receive,
    TimeoutExpired,
    /// The peer announced a new transmission.
    StartOfTransmission,
    /// Ends the session: cancel the countdown, refill both histograms and
    /// go idle.
    EndOfSession,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MachineAction {
    SendReal,
    SendDummy,
    SetTimer(f64),
    CancelTimer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Countdown {
    armed_at: f64,
    delay: f64,
}

/// One adaptive padding machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddingMachine {
    role: MachineRole,
    mode: Mode,
    countdown: Option<Countdown>,
    burst: TokenHistogram,
    gap: TokenHistogram,
}

impl PaddingMachine {
    pub fn new(role: MachineRole, burst: TokenHistogram, gap: TokenHistogram) -> Self {
        PaddingMachine { role, mode: Mode::Idle, countdown: None, burst, gap }
    }

    pub fn role(&self) -> MachineRole {
        self.role
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The delay currently being counted down.
    pub fn sampled_delay(&self) -> Option<f64> {
        self.countdown.map(|c| c.delay)
    }

    /// Absolute time at which the pending countdown expires.
    pub fn deadline(&self) -> Option<f64> {
        self.countdown.map(|c| c.armed_at + c.delay)
    }

    pub fn burst_histogram(&self) -> &TokenHistogram {
        &self.burst
    }

    pub fn gap_histogram(&self) -> &TokenHistogram {
        &self.gap
    }

    pub fn set_histograms(&mut self, burst: TokenHistogram, gap: TokenHistogram) {
        self.burst = burst;
        self.gap = gap;
    }

    fn is_trigger(&self, event: MachineEvent) -> bool {
        match self.role {
            MachineRole::Send => event == MachineEvent::PushReal,
            MachineRole::Receive => matches!(event, MachineEvent::Receive | MachineEvent::StartOfTransmission),
        }
    }

    fn arm(&mut self, mode: Mode, delay: f64, now: f64, actions: &mut Vec<MachineAction>) {
        self.mode = mode;
        self.countdown = Some(Countdown { armed_at: now, delay });
        actions.push(MachineAction::SetTimer(delay));
    }

    fn go_idle(&mut self, actions: &mut Vec<MachineAction>) {
        if self.countdown.take().is_some() {
            actions.push(MachineAction::CancelTimer);
        }
        self.mode = Mode::Idle;
    }

    /// Draws from the burst histogram: a finite delay arms burst mode, an
    /// infinity draw spends its token and idles.
    fn enter_burst<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        rng: &mut R,
        actions: &mut Vec<MachineAction>,
    ) -> Result<(), PaddingError> {
        match self.burst.sample_delay(rng)? {
            Delay::Finite(t) => self.arm(Mode::Burst, t, now, actions),
            Delay::Infinite => {
                self.burst.consume_token(Delay::Infinite);
                self.go_idle(actions);
            }
        }
        Ok(())
    }

    /// Draws from the gap histogram: a finite delay arms gap mode, an
    /// infinity draw spends its token and falls back to a burst draw.
    fn enter_gap<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        rng: &mut R,
        actions: &mut Vec<MachineAction>,
    ) -> Result<(), PaddingError> {
        match self.gap.sample_delay(rng)? {
            Delay::Finite(t) => {
                self.arm(Mode::Gap, t, now, actions);
                Ok(())
            }
            Delay::Infinite => {
                self.gap.consume_token(Delay::Infinite);
                self.enter_burst(now, rng, actions)
            }
        }
    }

    fn elapsed(&self, now: f64) -> (f64, f64) {
        let c = self.countdown.expect("active modes hold a countdown");
        (c.delay, (now - c.armed_at).clamp(0.0, c.delay))
    }

    /// Applies one event at time `now` and returns the resulting actions.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        event: MachineEvent,
        now: f64,
        rng: &mut R,
    ) -> Result<Vec<MachineAction>, PaddingError> {
        let mut actions = Vec::new();
        if event == MachineEvent::EndOfSession {
            self.go_idle(&mut actions);
            self.burst.refill();
            self.gap.refill();
            return Ok(actions);
        }
        let trigger = self.is_trigger(event);
        let forward = trigger && self.role == MachineRole::Send;
        match (self.mode, event) {
            (Mode::Idle, _) if trigger => {
                if forward {
                    actions.push(MachineAction::SendReal);
                }
                self.enter_burst(now, rng, &mut actions)?;
            }
            (Mode::Burst, _) if trigger => {
                if forward {
                    actions.push(MachineAction::SendReal);
                }
                let (sampled, actual) = self.elapsed(now);
                self.burst.return_token(sampled, actual);
                self.enter_burst(now, rng, &mut actions)?;
            }
            (Mode::Burst, MachineEvent::TimeoutExpired) => {
                let (sampled, _) = self.elapsed(now);
                self.burst.consume_token(Delay::Finite(sampled));
                self.countdown = None;
                actions.push(MachineAction::SendDummy);
                self.enter_gap(now, rng, &mut actions)?;
            }
            (Mode::Gap, MachineEvent::TimeoutExpired) => {
                let (sampled, _) = self.elapsed(now);
                self.gap.consume_token(Delay::Finite(sampled));
                self.countdown = None;
                actions.push(MachineAction::SendDummy);
                self.enter_gap(now, rng, &mut actions)?;
            }
            (Mode::Gap, _) if trigger => {
                let (sampled, actual) = self.elapsed(now);
                self.gap.return_token(sampled, actual);
                if forward {
                    actions.push(MachineAction::SendReal);
                }
                self.enter_burst(now, rng, &mut actions)?;
            }
            (mode, event) => return Err(PaddingError::InvalidTransition { mode, event }),
        }
        Ok(actions)
    }
}

/// Control messages exchanged between endpoints.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlPayload {
    /// Histograms the bridge should pad with, in client orientation.
    SetHistograms(HistogramSet),
    StartOfTransmission,
}

const TAG_SET_HISTOGRAMS: u8 = 0x01;
const TAG_START: u8 = 0x02;

/// Wire form of a control message: a type byte, then for histogram sets a
/// one-byte count followed by each histogram as `n` (u32), `M` (f64) and
/// `n` u32 token counts, all big-endian, zero-padded to the cell size.
/// Histograms travel as their initial token snapshot.
pub fn encode_control_payload(payload: &ControlPayload, cell_size: usize) -> Result<Vec<u8>, PaddingError> {
    let mut buf = Vec::with_capacity(cell_size);
    match payload {
        ControlPayload::StartOfTransmission => buf.push(TAG_START),
        ControlPayload::SetHistograms(set) => {
            buf.push(TAG_SET_HISTOGRAMS);
            let hists = set.as_array();
            buf.push(hists.len() as u8);
            for h in hists {
                let bins = u32::try_from(h.bins()).map_err(|_| PaddingError::MalformedControl("bin count".into()))?;
                buf.extend_from_slice(&bins.to_be_bytes());
                buf.extend_from_slice(&h.max_iat().to_be_bytes());
                for &k in h.initial_tokens() {
                    let k = u32::try_from(k)
                        .map_err(|_| PaddingError::MalformedControl(format!("token count {k} exceeds 32 bits")))?;
                    buf.extend_from_slice(&k.to_be_bytes());
                }
            }
        }
    }
    if buf.len() > cell_size {
        return Err(PaddingError::PayloadTooLarge { needed: buf.len(), cell: cell_size });
    }
    buf.resize(cell_size, 0);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], PaddingError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or_else(|| PaddingError::MalformedControl("truncated".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice has length N"))
    }
}

pub fn decode_control_payload(bytes: &[u8]) -> Result<ControlPayload, PaddingError> {
    let malformed = |m: &str| PaddingError::MalformedControl(m.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    let payload = match r.take::<1>()?[0] {
        TAG_START => ControlPayload::StartOfTransmission,
        TAG_SET_HISTOGRAMS => {
            let count = r.take::<1>()?[0];
            if count != 4 {
                return Err(malformed(&format!("expected 4 histograms, found {count}")));
            }
            let mut hists = Vec::with_capacity(4);
            for _ in 0..count {
                let bins = u32::from_be_bytes(r.take::<4>()?) as usize;
                if !(2..=1000).contains(&bins) {
                    return Err(malformed(&format!("bin count {bins} out of range")));
                }
                let max_iat = f64::from_be_bytes(r.take::<8>()?);
                let tokens = (0..bins)
                    .map(|_| r.take::<4>().map(|b| u64::from(u32::from_be_bytes(b))))
                    .collect::<Result<Vec<_>, _>>()?;
                hists.push(
                    TokenHistogram::from_tokens(max_iat, tokens)
                        .map_err(|e| PaddingError::MalformedControl(e.to_string()))?,
                );
            }
            let mut it = hists.into_iter();
            let mut next = || it.next().expect("four histograms decoded");
            ControlPayload::SetHistograms(HistogramSet {
                send_burst: next(),
                send_gap: next(),
                receive_burst: next(),
                receive_gap: next(),
            })
        }
        other => return Err(malformed(&format!("unknown type byte {other:#04x}"))),
    };
    if bytes[r.pos..].iter().any(|&b| b != 0) {
        return Err(malformed("non-zero padding"));
    }
    Ok(payload)
}

/// Wraps a control payload into an outgoing control cell sent at `time`.
pub fn encode_control(
    payload: &ControlPayload,
    time: f64,
    cell_size: u32,
) -> Result<(PacketEvent, Vec<u8>), PaddingError> {
    let bytes = encode_control_payload(payload, cell_size as usize)?;
    let packet = PacketEvent { time, direction: Direction::Outgoing, size: cell_size, kind: PacketKind::Control };
    Ok((packet, bytes))
}

pub fn decode_control(packet: &PacketEvent, bytes: &[u8]) -> Result<ControlPayload, PaddingError> {
    if packet.kind != PacketKind::Control {
        return Err(PaddingError::MalformedControl(format!("{:?} packet carries no control payload", packet.kind)));
    }
    decode_control_payload(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EndpointRole {
    Client,
    Bridge,
}

impl EndpointRole {
    /// Direction of packets this endpoint sends.
    pub fn outgoing(self) -> Direction {
        match self {
            EndpointRole::Client => Direction::Outgoing,
            EndpointRole::Bridge => Direction::Incoming,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MachineId {
    Send,
    Receive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub role: EndpointRole,
    /// Histograms in client orientation; the bridge mirrors them.
    pub histograms: HistogramSet,
    pub cell_size: u32,
    /// Whether the client ships its histograms to the bridge when a
    /// transmission starts.
    pub announce_histograms: bool,
}

impl EndpointConfig {
    pub fn client(histograms: HistogramSet) -> Self {
        EndpointConfig {
            role: EndpointRole::Client,
            histograms,
            cell_size: DEFAULT_CELL_SIZE,
            announce_histograms: true,
        }
    }

    pub fn bridge(histograms: HistogramSet) -> Self {
        EndpointConfig {
            role: EndpointRole::Bridge,
            histograms,
            cell_size: DEFAULT_CELL_SIZE,
            announce_histograms: false,
        }
    }

    pub fn with_cell_size(mut self, cell_size: u32) -> Self {
        self.cell_size = cell_size;
        self
    }
}

pub enum EndpointEvent<'a> {
    /// Local application data ready to go out.
    AppData,
    /// A packet from the peer, with its payload if it is a control cell.
    LinkPacket {
        packet: PacketEvent,
        payload: Option<&'a [u8]>,
    },
    Timer(MachineId),
}

/// A packet put on the link by an endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub packet: PacketEvent,
    pub payload: Option<Vec<u8>>,
}

/// A client or bridge running a send machine and a receive machine.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    config: EndpointConfig,
    send: PaddingMachine,
    receive: PaddingMachine,
    padding_sent: u64,
    padding_received: u64,
    control_sent: u64,
    session_started: bool,
    last_now: f64,
}

fn machines_for(role: EndpointRole, set: &HistogramSet) -> (PaddingMachine, PaddingMachine) {
    let oriented = match role {
        EndpointRole::Client => set.clone(),
        EndpointRole::Bridge => set.mirrored(),
    };
    (
        PaddingMachine::new(MachineRole::Send, oriented.send_burst, oriented.send_gap),
        PaddingMachine::new(MachineRole::Receive, oriented.receive_burst, oriented.receive_gap),
    )
}

impl Endpoint {
    pub fn new(config: EndpointConfig) -> Self {
        let (send, receive) = machines_for(config.role, &config.histograms);
        Endpoint {
            config,
            send,
            receive,
            padding_sent: 0,
            padding_received: 0,
            control_sent: 0,
            session_started: false,
            last_now: f64::NEG_INFINITY,
        }
    }

    pub fn role(&self) -> EndpointRole {
        self.config.role
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn machine(&self, id: MachineId) -> &PaddingMachine {
        match id {
            MachineId::Send => &self.send,
            MachineId::Receive => &self.receive,
        }
    }

    fn machine_mut(&mut self, id: MachineId) -> &mut PaddingMachine {
        match id {
            MachineId::Send => &mut self.send,
            MachineId::Receive => &mut self.receive,
        }
    }

    /// Dummy packets sent so far.
    pub fn padding_sent(&self) -> u64 {
        self.padding_sent
    }

    /// Dummy packets received from the peer so far.
    pub fn padding_received(&self) -> u64 {
        self.padding_received
    }

    pub fn control_sent(&self) -> u64 {
        self.control_sent
    }

    /// Earliest pending countdown, ties going to the send machine.
    pub fn next_timer(&self) -> Option<(f64, MachineId)> {
        let send = self.send.deadline().map(|t| (t, MachineId::Send));
        let recv = self.receive.deadline().map(|t| (t, MachineId::Receive));
        match (send, recv) {
            (Some(s), Some(r)) => Some(if r.0 < s.0 { r } else { s }),
            (s, r) => s.or(r),
        }
    }

    /// True when both machines idle with no countdown pending.
    pub fn is_quiescent(&self) -> bool {
        self.send.mode() == Mode::Idle && self.receive.mode() == Mode::Idle
    }

    fn cell(&self, now: f64, kind: PacketKind) -> PacketEvent {
        PacketEvent { time: now, direction: self.config.role.outgoing(), size: self.config.cell_size, kind }
    }

    fn run_machine<R: Rng + ?Sized>(
        &mut self,
        id: MachineId,
        event: MachineEvent,
        now: f64,
        rng: &mut R,
        out: &mut Vec<Emission>,
    ) -> Result<(), PaddingError> {
        let was_idle = self.machine(id).mode() == Mode::Idle;
        let actions = self.machine_mut(id).step(event, now, rng)?;
        for action in actions {
            match action {
                MachineAction::SendReal => {
                    out.push(Emission { packet: self.cell(now, PacketKind::Real), payload: None })
                }
                MachineAction::SendDummy => {
                    self.padding_sent += 1;
                    out.push(Emission { packet: self.cell(now, PacketKind::Dummy), payload: None });
                }
                MachineAction::SetTimer(_) | MachineAction::CancelTimer => {}
            }
        }
        let left_idle = was_idle && self.machine(id).mode() != Mode::Idle;
        if id == MachineId::Send && left_idle && self.config.role == EndpointRole::Client && !self.session_started {
            self.session_started = true;
            if self.config.announce_histograms {
                let set = ControlPayload::SetHistograms(self.config.histograms.clone());
                out.push(self.control(&set, now)?);
            }
            out.push(self.control(&ControlPayload::StartOfTransmission, now)?);
        }
        Ok(())
    }

    fn control(&mut self, payload: &ControlPayload, now: f64) -> Result<Emission, PaddingError> {
        let (packet, bytes) = encode_control(payload, now, self.config.cell_size)?;
        self.control_sent += 1;
        Ok(Emission { packet, payload: Some(bytes) })
    }

    /// Feeds one event to the endpoint at time `now` and returns the
    /// packets it puts on the link. Application data is emitted with size
    /// equal to the cell size; use [`Endpoint::handle_app_data`] to keep the
    /// original size.
    pub fn handle<R: Rng + ?Sized>(
        &mut self,
        event: EndpointEvent<'_>,
        now: f64,
        rng: &mut R,
    ) -> Result<Vec<Emission>, PaddingError> {
        if now < self.last_now {
            return Err(PaddingError::ClockRegression { now, last: self.last_now });
        }
        self.last_now = now;
        let mut out = Vec::new();
        match event {
            EndpointEvent::AppData => self.run_machine(MachineId::Send, MachineEvent::PushReal, now, rng, &mut out)?,
            EndpointEvent::Timer(id) => self.run_machine(id, MachineEvent::TimeoutExpired, now, rng, &mut out)?,
            EndpointEvent::LinkPacket { packet, payload } => {
                let mut event = MachineEvent::Receive;
                match packet.kind {
                    PacketKind::Dummy => {
                        self.padding_received += 1;
                        // Dummies steer an active receive machine but never
                        // wake an idle one, or the two endpoints would keep
                        // answering each other's padding forever.
                        if self.receive.mode() == Mode::Idle {
                            return Ok(out);
                        }
                    }
                    PacketKind::Control => match decode_control(&packet, payload.unwrap_or(&[]))? {
                        ControlPayload::StartOfTransmission => event = MachineEvent::StartOfTransmission,
                        ControlPayload::SetHistograms(set) => self.install(set),
                    },
                    PacketKind::Real => {}
                }
                self.run_machine(MachineId::Receive, event, now, rng, &mut out)?;
            }
        }
        Ok(out)
    }

    /// Like [`Endpoint::handle`] with [`EndpointEvent::AppData`], but the
    /// real packet keeps `size`.
    pub fn handle_app_data<R: Rng + ?Sized>(
        &mut self,
        size: u32,
        now: f64,
        rng: &mut R,
    ) -> Result<Vec<Emission>, PaddingError> {
        let mut out = self.handle(EndpointEvent::AppData, now, rng)?;
        for e in out.iter_mut().filter(|e| e.packet.kind == PacketKind::Real) {
            e.packet.size = size;
        }
        Ok(out)
    }

    /// Replaces the histograms of both machines, keeping their modes and
    /// countdowns.
    fn install(&mut self, set: HistogramSet) {
        let (send, receive) = machines_for(self.config.role, &set);
        self.send.set_histograms(send.burst, send.gap);
        self.receive.set_histograms(receive.burst, receive.gap);
        self.config.histograms = set;
    }
}
