//! Deterministic message-passing harness.
//!
//! Scenario runners push every inter-party message through a [`SimNet`],
//! which assigns a strictly increasing sequence number, records the message
//! in the transcript exactly as it traversed the wire, applies the fault
//! plan, and returns what actually got delivered. Transcripts are therefore
//! a pure function of (configuration, seed, fault plan), and every security
//! claim about "what an observer on this link sees" is a scan over them.
//!
//! Faults model an active adversary on a link: flip a bit, replay, drop, or
//! delay a message. Delays reorder delivery within a bounded window while
//! the transcript keeps send order.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::net::{TcpListener, TcpStream};

use thiserror::Error;

use crate::crypto::DetRng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad fault spec: {0}")]
    BadFault(String),
    #[error("bad transcript: {0}")]
    BadTranscript(String),
    #[error("transport setup failed: {0}")]
    Transport(String),
}

/// Link a message travels on. Privacy assertions are per-segment: what the
/// receiving system sees (TA_RS), what the network operator sees (NOC), and
/// so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Segment {
    TaPca,
    TaRs,
    PcaCp,
    RsPca,
    Noc,
    DeviceLocal,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::TaPca => "TA_PCA",
            Segment::TaRs => "TA_RS",
            Segment::PcaCp => "PCA_CP",
            Segment::RsPca => "RS_PCA",
            Segment::Noc => "NOC",
            Segment::DeviceLocal => "DEVICE_LOCAL",
        }
    }

    pub fn parse(s: &str) -> Option<Segment> {
        Some(match s {
            "TA_PCA" => Segment::TaPca,
            "TA_RS" => Segment::TaRs,
            "PCA_CP" => Segment::PcaCp,
            "RS_PCA" => Segment::RsPca,
            "NOC" => Segment::Noc,
            "DEVICE_LOCAL" => Segment::DeviceLocal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    TamperBit,
    Replay,
    Drop,
    Delay,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::TamperBit => "TAMPER_BIT",
            FaultKind::Replay => "REPLAY",
            FaultKind::Drop => "DROP",
            FaultKind::Delay => "DELAY",
        }
    }

    pub fn parse(s: &str) -> Option<FaultKind> {
        Some(match s {
            "TAMPER_BIT" => FaultKind::TamperBit,
            "REPLAY" => FaultKind::Replay,
            "DROP" => FaultKind::Drop,
            "DELAY" => FaultKind::Delay,
            _ => return None,
        })
    }
}

/// One fault rule: which messages it matches and what it does to them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultRule {
    pub action: FaultKind,
    pub segment: Option<Segment>,
    pub kind: Option<String>,
    pub seq: Option<u64>,
    /// 1-based index among matching messages; absent means every match.
    pub nth: Option<u64>,
    /// Delay only: how many later deliveries on the segment overtake the
    /// held message.
    pub window: u64,
}

impl FaultRule {
    /// Parses `ACTION[:key=value]*` with keys segment, kind, seq, nth,
    /// window. A bare value naming a segment is shorthand for `segment=`.
    /// Examples: `TAMPER_BIT:TA_RS`, `DROP:kind=TICKET_ACK:nth=2`,
    /// `DELAY:segment=TA_RS:window=3`.
    pub fn parse(spec: &str) -> Result<FaultRule, HarnessError> {
        let mut parts = spec.split(':');
        let action_token = parts.next().unwrap_or_default();
        let action = FaultKind::parse(action_token)
            .ok_or_else(|| HarnessError::BadFault(format!("unknown action {action_token:?}")))?;
        let mut rule = FaultRule {
            action,
            segment: None,
            kind: None,
            seq: None,
            nth: None,
            window: 1,
        };
        for part in parts {
            if let Some((key, value)) = part.split_once('=') {
                match key {
                    "segment" => {
                        rule.segment = Some(Segment::parse(value).ok_or_else(|| {
                            HarnessError::BadFault(format!("unknown segment {value:?}"))
                        })?);
                    }
                    "kind" => rule.kind = Some(value.to_string()),
                    "seq" => {
                        rule.seq = Some(value.parse().map_err(|_| {
                            HarnessError::BadFault(format!("bad seq {value:?}"))
                        })?);
                    }
                    "nth" => {
                        let n: u64 = value.parse().map_err(|_| {
                            HarnessError::BadFault(format!("bad nth {value:?}"))
                        })?;
                        if n == 0 {
                            return Err(HarnessError::BadFault("nth is 1-based".into()));
                        }
                        rule.nth = Some(n);
                    }
                    "window" => {
                        let w: u64 = value.parse().map_err(|_| {
                            HarnessError::BadFault(format!("bad window {value:?}"))
                        })?;
                        if w == 0 {
                            return Err(HarnessError::BadFault("window must be positive".into()));
                        }
                        rule.window = w;
                    }
                    other => {
                        return Err(HarnessError::BadFault(format!("unknown key {other:?}")))
                    }
                }
            } else if let Some(segment) = Segment::parse(part) {
                rule.segment = Some(segment);
            } else {
                return Err(HarnessError::BadFault(format!("unparseable part {part:?}")));
            }
        }
        Ok(rule)
    }

    fn matches(&self, envelope: &Envelope) -> bool {
        self.segment.is_none_or(|s| s == envelope.segment)
            && self.kind.as_deref().is_none_or(|k| k == envelope.kind)
            && self.seq.is_none_or(|s| s == envelope.seq)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub rules: Vec<FaultRule>,
}

impl FaultPlan {
    pub fn parse_all(specs: &[String]) -> Result<FaultPlan, HarnessError> {
        let rules = specs.iter().map(|s| FaultRule::parse(s)).collect::<Result<_, _>>()?;
        Ok(FaultPlan { rules })
    }
}

/// One recorded message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub segment: Segment,
    pub kind: String,
    pub body: Vec<u8>,
}

impl Envelope {
    pub fn transcript_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.seq,
            self.from,
            self.to,
            self.segment.as_str(),
            self.kind,
            hex::encode(&self.body)
        )
    }

    pub fn parse_line(line: &str) -> Result<Envelope, HarnessError> {
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 6 {
            return Err(HarnessError::BadTranscript(format!(
                "expected 6 fields, got {}",
                fields.len()
            )));
        }
        let seq = fields[0]
            .parse()
            .map_err(|_| HarnessError::BadTranscript(format!("bad seq {:?}", fields[0])))?;
        let segment = Segment::parse(fields[3])
            .ok_or_else(|| HarnessError::BadTranscript(format!("bad segment {:?}", fields[3])))?;
        let body = hex::decode(fields[5])
            .map_err(|_| HarnessError::BadTranscript("bad body hex".into()))?;
        Ok(Envelope {
            seq,
            from: fields[1].to_string(),
            to: fields[2].to_string(),
            segment,
            kind: fields[4].to_string(),
            body,
        })
    }
}

pub fn render_transcript(envelopes: &[Envelope]) -> String {
    let mut out = String::new();
    for e in envelopes {
        out.push_str(&e.transcript_line());
        out.push('\n');
    }
    out
}

pub fn parse_transcript(text: &str) -> Result<Vec<Envelope>, HarnessError> {
    let mut envelopes = Vec::new();
    let mut last_seq: Option<u64> = None;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let envelope = Envelope::parse_line(line)?;
        if let Some(last) = last_seq {
            if envelope.seq <= last {
                return Err(HarnessError::BadTranscript(format!(
                    "seq {} not increasing after {}",
                    envelope.seq, last
                )));
            }
        }
        last_seq = Some(envelope.seq);
        envelopes.push(envelope);
    }
    Ok(envelopes)
}

/// What a receiver actually gets after faults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub from: String,
    pub to: String,
    pub segment: Segment,
    pub kind: String,
    pub body: Vec<u8>,
}

/// Byte path between send and delivery. In-process hands bytes over
/// directly; the socket carrier pushes every message through a loopback TCP
/// connection to show the format survives a real wire.
pub trait Carrier {
    fn carry(&mut self, body: &[u8]) -> Result<Vec<u8>, HarnessError>;
}

#[derive(Debug, Default)]
pub struct InprocCarrier;

impl Carrier for InprocCarrier {
    fn carry(&mut self, body: &[u8]) -> Result<Vec<u8>, HarnessError> {
        Ok(body.to_vec())
    }
}

/// Loopback echo: each body is length-prefixed, written to a local TCP
/// socket, and read back from the echo thread before delivery.
pub struct SocketCarrier {
    stream: TcpStream,
}

impl SocketCarrier {
    pub fn connect() -> Result<Self, HarnessError> {
        let listener = TcpListener::bind("127.0.0.1:0")
            .map_err(|e| HarnessError::Transport(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| HarnessError::Transport(e.to_string()))?;
        std::thread::spawn(move || {
            if let Ok((mut conn, _)) = listener.accept() {
                let mut len_buf = [0u8; 4];
                loop {
                    if conn.read_exact(&mut len_buf).is_err() {
                        break;
                    }
                    let len = u32::from_be_bytes(len_buf) as usize;
                    let mut body = vec![0u8; len];
                    if conn.read_exact(&mut body).is_err() {
                        break;
                    }
                    if conn.write_all(&len_buf).is_err() || conn.write_all(&body).is_err() {
                        break;
                    }
                }
            }
        });
        let stream =
            TcpStream::connect(addr).map_err(|e| HarnessError::Transport(e.to_string()))?;
        Ok(SocketCarrier { stream })
    }
}

impl Carrier for SocketCarrier {
    fn carry(&mut self, body: &[u8]) -> Result<Vec<u8>, HarnessError> {
        let len = (body.len() as u32).to_be_bytes();
        self.stream
            .write_all(&len)
            .and_then(|_| self.stream.write_all(body))
            .map_err(|e| HarnessError::Transport(e.to_string()))?;
        let mut len_buf = [0u8; 4];
        self.stream
            .read_exact(&mut len_buf)
            .map_err(|e| HarnessError::Transport(e.to_string()))?;
        let mut echoed = vec![0u8; u32::from_be_bytes(len_buf) as usize];
        self.stream
            .read_exact(&mut echoed)
            .map_err(|e| HarnessError::Transport(e.to_string()))?;
        Ok(echoed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    Inproc,
    Socket,
}

impl Transport {
    pub fn parse(s: &str) -> Option<Transport> {
        match s {
            "inproc" => Some(Transport::Inproc),
            "socket" => Some(Transport::Socket),
            _ => None,
        }
    }
}

struct HeldEnvelope {
    envelope: Envelope,
    /// Deliveries on the same segment still allowed to overtake.
    remaining: u64,
}

/// The simulated network: transcript recorder plus fault injector.
pub struct SimNet {
    carrier: Box<dyn Carrier>,
    faults: FaultPlan,
    rng: DetRng,
    envelopes: Vec<Envelope>,
    next_seq: u64,
    match_counts: BTreeMap<usize, u64>,
    held: Vec<HeldEnvelope>,
}

impl SimNet {
    pub fn new(faults: FaultPlan, rng: DetRng, transport: Transport) -> Result<Self, HarnessError> {
        let carrier: Box<dyn Carrier> = match transport {
            Transport::Inproc => Box::new(InprocCarrier),
            Transport::Socket => Box::new(SocketCarrier::connect()?),
        };
        Ok(SimNet {
            carrier,
            faults,
            rng,
            envelopes: Vec::new(),
            next_seq: 0,
            match_counts: BTreeMap::new(),
            held: Vec::new(),
        })
    }

    pub fn envelopes(&self) -> &[Envelope] {
        &self.envelopes
    }

    pub fn transcript_text(&self) -> String {
        render_transcript(&self.envelopes)
    }

    fn record(&mut self, from: &str, to: &str, segment: Segment, kind: &str, body: Vec<u8>) -> Envelope {
        let envelope = Envelope {
            seq: self.next_seq,
            from: from.to_string(),
            to: to.to_string(),
            segment,
            kind: kind.to_string(),
            body,
        };
        self.next_seq += 1;
        self.envelopes.push(envelope.clone());
        envelope
    }

    fn deliver(&mut self, envelope: &Envelope) -> Result<Delivery, HarnessError> {
        let body = self.carrier.carry(&envelope.body)?;
        Ok(Delivery {
            from: envelope.from.clone(),
            to: envelope.to.clone(),
            segment: envelope.segment,
            kind: envelope.kind.clone(),
            body,
        })
    }

    /// Releases held messages whose window on `segment` has run out. Call
    /// after each delivery on the segment.
    fn release_due(&mut self, segment: Segment, out: &mut Vec<Delivery>) -> Result<(), HarnessError> {
        for h in &mut self.held {
            if h.envelope.segment == segment {
                h.remaining = h.remaining.saturating_sub(1);
            }
        }
        // Index-based sweep: a released delivery decrements nothing further.
        let mut i = 0;
        while i < self.held.len() {
            if self.held[i].remaining == 0 {
                let held = self.held.remove(i);
                out.push(self.deliver(&held.envelope)?);
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    /// Sends one message: records it (post-fault, the wire view) and
    /// returns everything delivered as a consequence, in order.
    pub fn send(
        &mut self,
        from: &str,
        to: &str,
        segment: Segment,
        kind: &str,
        body: &[u8],
    ) -> Result<Vec<Delivery>, HarnessError> {
        let mut body = body.to_vec();
        let mut dropped = false;
        let mut replayed = false;
        let mut delayed_window = None;

        let probe = Envelope {
            seq: self.next_seq,
            from: from.to_string(),
            to: to.to_string(),
            segment,
            kind: kind.to_string(),
            body: Vec::new(),
        };
        for (idx, rule) in self.faults.rules.clone().iter().enumerate() {
            if !rule.matches(&probe) {
                continue;
            }
            let count = self.match_counts.entry(idx).or_insert(0);
            *count += 1;
            if let Some(nth) = rule.nth {
                if *count != nth {
                    continue;
                }
            }
            match rule.action {
                FaultKind::TamperBit => {
                    if !body.is_empty() {
                        let bit = (self.rng.next_u64() as usize) % (body.len() * 8);
                        body[bit / 8] ^= 1 << (bit % 8);
                    }
                }
                FaultKind::Drop => dropped = true,
                FaultKind::Replay => replayed = true,
                FaultKind::Delay => delayed_window = Some(rule.window),
            }
        }

        let envelope = self.record(from, to, segment, kind, body);
        let mut out = Vec::new();

        if dropped {
            return Ok(out);
        }
        if let Some(window) = delayed_window {
            self.held.push(HeldEnvelope { envelope, remaining: window });
            return Ok(out);
        }

        out.push(self.deliver(&envelope)?);
        if replayed {
            let copy = self.record(from, to, segment, kind, envelope.body.clone());
            out.push(self.deliver(&copy)?);
        }
        self.release_due(segment, &mut out)?;
        Ok(out)
    }

    /// Delivers every still-held message; runners call this at phase ends
    /// so delayed traffic is never lost.
    pub fn flush(&mut self) -> Result<Vec<Delivery>, HarnessError> {
        let held = std::mem::take(&mut self.held);
        let mut out = Vec::new();
        for h in held {
            out.push(self.deliver(&h.envelope)?);
        }
        Ok(out)
    }
}

// ---- transcript queries ----

pub fn count_kind(envelopes: &[Envelope], kind: &str) -> usize {
    envelopes.iter().filter(|e| e.kind == kind).count()
}

/// Sequence numbers of envelopes on `segment` whose body contains `needle`.
pub fn scan_segment(envelopes: &[Envelope], segment: Segment, needle: &[u8]) -> Vec<u64> {
    envelopes
        .iter()
        .filter(|e| {
            e.segment == segment
                && !needle.is_empty()
                && e.body.windows(needle.len()).any(|w| w == needle)
        })
        .map(|e| e.seq)
        .collect()
}

/// Envelopes a party sent or received, in transcript order.
pub fn timeline<'a>(envelopes: &'a [Envelope], party: &str) -> Vec<&'a Envelope> {
    envelopes.iter().filter(|e| e.from == party || e.to == party).collect()
}

/// Scenario outcome: one line per event, plus violated invariants. A run
/// with violations exits nonzero from the command line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Summary {
    pub events: Vec<String>,
    pub violations: Vec<String>,
}

impl Summary {
    pub fn event(&mut self, line: impl Into<String>) {
        self.events.push(line.into());
    }

    pub fn violation(&mut self, line: impl Into<String>) {
        self.violations.push(line.into());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(e);
            out.push('\n');
        }
        for v in &self.violations {
            out.push_str("violation: ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
