//! Rate-limited probe executor over a pluggable transport.
//!
//! A scan interleaves a sender lane (paced by the rate limit, retransmits
//! before fresh targets) and a receiver lane (drains the backend between send
//! slots) over one correlation table. Both lanes are driven by the backend's
//! clock, so the same loop runs in wall time against sockets and in virtual
//! time against the simulator.

mod backend;
mod correlate;
pub mod live;

pub use backend::{Backend, BackendConfig, BackendError, BackendFactory, BackendRegistry, Datagram};
pub use correlate::{match_response, CorrelationTable, MatchOutcome, Outstanding, UnsolicitedReason};

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefix::Address;
use crate::wire;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_RETRIES: u8 = 1;
pub const DEFAULT_MAX_PPS: u32 = 10_000;
/// Ceiling for the shipped configuration.
pub const MAX_DEFAULT_PPS: u32 = 100_000;

/// Opaque correlation token carried in every probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeKind {
    Icmp6Echo {
        hop_limit: u8,
        payload_tag: u16,
    },
    TcpSyn {
        port: u16,
    },
    /// One request written to a TCP connection or UDP socket; up to `read_limit` bytes read back.
    AppRequest {
        transport: Transport,
        port: u16,
        request: Vec<u8>,
        read_limit: usize,
    },
}

impl ProbeKind {
    pub(crate) fn remote_port(&self) -> Option<(u16, u8)> {
        match self {
            ProbeKind::Icmp6Echo { .. } => None,
            ProbeKind::TcpSyn { port } => Some((*port, wire::NH_TCP)),
            ProbeKind::AppRequest {
                transport: Transport::Tcp,
                port,
                ..
            } => Some((*port, wire::NH_TCP)),
            ProbeKind::AppRequest {
                transport: Transport::Udp,
                port,
                ..
            } => Some((*port, wire::NH_UDP)),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("hop limit must be at least 1")]
    ZeroHopLimit,
    #[error("read limit must be positive")]
    ZeroReadLimit,
    #[error("port must be in 1..=65535")]
    ZeroPort,
    #[error("rate must be at least 1 packet per second")]
    ZeroRate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub timeout: Duration,
    pub retries: u8,
}

impl ProbeSpec {
    pub fn new(kind: ProbeKind) -> Result<ProbeSpec, SpecError> {
        match &kind {
            ProbeKind::Icmp6Echo { hop_limit: 0, .. } => return Err(SpecError::ZeroHopLimit),
            ProbeKind::TcpSyn { port: 0 } | ProbeKind::AppRequest { port: 0, .. } => return Err(SpecError::ZeroPort),
            ProbeKind::AppRequest { read_limit: 0, .. } => return Err(SpecError::ZeroReadLimit),
            _ => {}
        }
        Ok(ProbeSpec {
            kind,
            timeout: DEFAULT_TIMEOUT,
            retries: DEFAULT_RETRIES,
        })
    }

    pub fn echo(hop_limit: u8, payload_tag: u16) -> Result<ProbeSpec, SpecError> {
        ProbeSpec::new(ProbeKind::Icmp6Echo { hop_limit, payload_tag })
    }

    pub fn syn(port: u16) -> Result<ProbeSpec, SpecError> {
        ProbeSpec::new(ProbeKind::TcpSyn { port })
    }

    pub fn app(transport: Transport, port: u16, request: Vec<u8>, read_limit: usize) -> Result<ProbeSpec, SpecError> {
        ProbeSpec::new(ProbeKind::AppRequest {
            transport,
            port,
            request,
            read_limit,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: u8) -> Self {
        self.retries = retries;
        self
    }
}

/// Bounded send rate in packets per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimit {
    max_pps: u32,
}

impl RateLimit {
    pub fn new(max_pps: u32) -> Result<RateLimit, SpecError> {
        if max_pps == 0 {
            return Err(SpecError::ZeroRate);
        }
        Ok(RateLimit { max_pps })
    }

    pub fn max_pps(&self) -> u32 {
        self.max_pps
    }

    /// Minimum spacing between two sends, rounded up so no 1 s window exceeds the rate.
    pub fn interval(&self) -> Duration {
        Duration::from_nanos(1_000_000_000u64.div_ceil(u64::from(self.max_pps)))
    }
}

impl Default for RateLimit {
    fn default() -> Self {
        RateLimit {
            max_pps: DEFAULT_MAX_PPS,
        }
    }
}

/// Classified content of a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponsePayload {
    Icmp {
        icmp_type: u8,
        icmp_code: u8,
        echoed_hop_limit: u8,
    },
    SynAck,
    Rst,
    AppPayload {
        status_line: String,
        headers: Vec<(String, String)>,
        #[serde(with = "hex_bytes")]
        body_prefix: Vec<u8>,
    },
    Timeout,
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        s.serialize_str(&hex)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(s.get(i..i + 2).unwrap_or("zz"), 16).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl ResponsePayload {
    /// HTTP responses are split into status line, headers and body; anything
    /// else is kept whole in `body_prefix` with an empty status line.
    pub fn from_app_bytes(bytes: &[u8], read_limit: usize) -> ResponsePayload {
        let bytes = &bytes[..bytes.len().min(read_limit)];
        if let Some((status_line, headers, body)) = parse_http(bytes) {
            return ResponsePayload::AppPayload {
                status_line,
                headers,
                body_prefix: body.to_vec(),
            };
        }
        ResponsePayload::AppPayload {
            status_line: String::new(),
            headers: Vec::new(),
            body_prefix: bytes.to_vec(),
        }
    }

    pub fn is_timeout(&self) -> bool {
        matches!(self, ResponsePayload::Timeout)
    }
}

/// Status line, headers and body of an HTTP/1.x response.
pub type HttpParts<'a> = (String, Vec<(String, String)>, &'a [u8]);

/// Splits an HTTP/1.x response. Returns `None` if the bytes are not HTTP.
pub fn parse_http(bytes: &[u8]) -> Option<HttpParts<'_>> {
    if !bytes.starts_with(b"HTTP/") {
        return None;
    }
    let (head, body) = match find(bytes, b"\r\n\r\n") {
        Some(i) => (&bytes[..i], &bytes[i + 4..]),
        None => match find(bytes, b"\n\n") {
            Some(i) => (&bytes[..i], &bytes[i + 2..]),
            None => (bytes, &bytes[bytes.len()..]),
        },
    };
    let head = String::from_utf8_lossy(head);
    let mut lines = head.lines();
    let status_line = lines.next()?.trim_end().to_string();
    let headers = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    Some((status_line, headers, body))
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// One classified observation tied to the probe that caused it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub target: Address,
    pub source: Address,
    pub payload: ResponsePayload,
    /// Time from the last transmission of the probe to the response (or to giving up).
    pub rtt: Duration,
    /// Scan-clock time at which the record was produced.
    pub at: Duration,
    pub probe_id: ProbeId,
    /// Remote port for TCP and UDP probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

/// A probe to schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub target: Address,
    pub spec: ProbeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Consumer of scan output. `on_tick` lets a consumer stop a scan on clock
/// conditions alone (for example, response silence); `next_deadline` tells the
/// engine when to wake to re-check them. Times are relative to scan start.
pub trait ScanSink {
    fn on_response(&mut self, response: ProbeResponse) -> Flow;

    fn on_tick(&mut self, _elapsed: Duration) -> Flow {
        Flow::Continue
    }

    fn next_deadline(&self) -> Option<Duration> {
        None
    }
}

impl ScanSink for Vec<ProbeResponse> {
    fn on_response(&mut self, response: ProbeResponse) -> Flow {
        self.push(response);
        Flow::Continue
    }
}

impl<F: FnMut(ProbeResponse) -> Flow> ScanSink for F {
    fn on_response(&mut self, response: ProbeResponse) -> Flow {
        self(response)
    }
}

/// Counters for one completed or aborted scan.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub probed: u64,
    pub matched: u64,
    pub timeouts: u64,
    pub abandoned: u64,
    pub sent_packets: u64,
    pub unsolicited: u64,
    pub started_at: Duration,
    pub finished_at: Duration,
    pub aborted: bool,
}

impl ScanSummary {
    pub fn elapsed(&self) -> Duration {
        self.finished_at.saturating_sub(self.started_at)
    }

    /// `matched + timeouts == probed` for every scan that ran to completion.
    pub fn conserved(&self) -> bool {
        self.matched + self.timeouts + self.abandoned == self.probed && (self.aborted || self.abandoned == 0)
    }
}

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("backend failed after {} probes: {source}", summary.probed)]
    Backend {
        #[source]
        source: BackendError,
        summary: Box<ScanSummary>,
    },
}

/// Drives probes through a backend.
pub struct Scanner<'b> {
    backend: &'b mut dyn Backend,
    rate: RateLimit,
    table: CorrelationTable,
    next_id: u32,
    unsolicited_total: u64,
    last_send: Option<Duration>,
    timeout_override: Option<Duration>,
    retries_override: Option<u8>,
}

impl<'b> Scanner<'b> {
    /// `session` seeds the echo identifier and payload tag so concurrent
    /// scanners on one host do not claim each other's responses.
    pub fn new(backend: &'b mut dyn Backend, rate: RateLimit, session: u32) -> Self {
        Scanner {
            backend,
            rate,
            table: CorrelationTable::new((session >> 16) as u16 ^ 0x5043, session as u16 ^ 0x414e),
            next_id: 1,
            unsolicited_total: 0,
            last_send: None,
            timeout_override: None,
            retries_override: None,
        }
    }

    /// Replaces the timeout and retry count of every probe this scanner sends,
    /// whatever the stage that built the probe asked for.
    pub fn with_timing(mut self, timeout: Option<Duration>, retries: Option<u8>) -> Self {
        self.timeout_override = timeout;
        self.retries_override = retries;
        self
    }

    pub fn payload_tag(&self) -> u16 {
        self.table.tag()
    }

    pub fn rate(&self) -> RateLimit {
        self.rate
    }

    pub fn now(&self) -> Duration {
        self.backend.now()
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn unsolicited_total(&self) -> u64 {
        self.unsolicited_total
    }

    /// Probes each target once with `spec` (plus retries).
    pub fn run_scan<I, S>(&mut self, targets: I, spec: &ProbeSpec, sink: &mut S) -> Result<ScanSummary, ScanError>
    where
        I: IntoIterator<Item = Address>,
        S: ScanSink + ?Sized,
    {
        let spec = spec.clone();
        self.run(
            targets.into_iter().map(move |target| Probe {
                target,
                spec: spec.clone(),
            }),
            sink,
        )
    }

    /// Convenience wrapper collecting every record.
    pub fn collect<I>(&mut self, probes: I) -> Result<(Vec<ProbeResponse>, ScanSummary), ScanError>
    where
        I: IntoIterator<Item = Probe>,
    {
        let mut out = Vec::new();
        let summary = self.run(probes, &mut out)?;
        Ok((out, summary))
    }

    pub fn run<I, S>(&mut self, probes: I, sink: &mut S) -> Result<ScanSummary, ScanError>
    where
        I: IntoIterator<Item = Probe>,
        S: ScanSink + ?Sized,
    {
        let interval = self.rate.interval();
        let start = self.backend.now();
        let mut summary = ScanSummary {
            started_at: start,
            ..ScanSummary::default()
        };
        let mut pending = probes.into_iter().peekable();
        let mut retransmit: VecDeque<ProbeId> = VecDeque::new();
        let mut deadlines: BinaryHeap<Reverse<(Duration, ProbeId, u8)>> = BinaryHeap::new();
        let mut in_scan: Vec<ProbeId> = Vec::new();
        let mut next_slot = self.last_send.map_or(start, |t| (t + interval).max(start));

        macro_rules! bail {
            ($err:expr) => {{
                summary.finished_at = self.backend.now();
                summary.aborted = true;
                summary.abandoned = in_scan.iter().filter(|id| self.table.get(**id).is_some()).count() as u64;
                for id in &in_scan {
                    self.table.remove(*id);
                }
                return Err(ScanError::Backend {
                    source: $err,
                    summary: Box::new(summary),
                });
            }};
        }

        let stop = 'scan: loop {
            let now = self.backend.now();

            while let Some(Reverse((deadline, id, attempt))) = deadlines.peek().copied() {
                if deadline > now {
                    break;
                }
                deadlines.pop();
                let Some(o) = self.table.get(id) else { continue };
                if o.attempts != attempt {
                    continue;
                }
                if attempt <= o.retries {
                    retransmit.push_back(id);
                } else {
                    let o = self.table.remove(id).unwrap();
                    summary.timeouts += 1;
                    let record = ProbeResponse {
                        target: o.target,
                        source: o.target,
                        payload: ResponsePayload::Timeout,
                        rtt: now.saturating_sub(o.last_sent),
                        at: now.saturating_sub(start),
                        probe_id: id,
                        port: o.kind.remote_port().map(|(p, _)| p),
                    };
                    if sink.on_response(record) == Flow::Stop {
                        break 'scan true;
                    }
                }
            }

            if sink.on_tick(now.saturating_sub(start)) == Flow::Stop {
                break 'scan true;
            }

            if now >= next_slot {
                let mut sent = None;
                if let Some(id) = retransmit.pop_front() {
                    if let Some(o) = self.table.get_mut(id) {
                        o.attempts += 1;
                        o.last_sent = now;
                        let (bytes, target, attempts) = (o.bytes.clone(), o.target, o.attempts);
                        let timeout = o.timeout;
                        if let Err(e) = self.backend.send(&bytes, target) {
                            bail!(e);
                        }
                        sent = Some((id, attempts, timeout));
                    }
                } else if let Some(mut probe) = pending.next() {
                    if let Some(t) = self.timeout_override {
                        probe.spec.timeout = t;
                    }
                    if let Some(r) = self.retries_override {
                        probe.spec.retries = r;
                    }
                    let id = ProbeId(self.next_id);
                    self.next_id = self.next_id.wrapping_add(1).max(1);
                    let source = self.backend.local_address();
                    let bytes = self.table.insert(id, probe.target, &probe.spec, source, now);
                    in_scan.push(id);
                    summary.probed += 1;
                    if let Err(e) = self.backend.send(&bytes, probe.target) {
                        bail!(e);
                    }
                    sent = Some((id, 1, probe.spec.timeout));
                }
                if let Some((id, attempts, timeout)) = sent {
                    summary.sent_packets += 1;
                    self.last_send = Some(now);
                    next_slot = now + interval;
                    deadlines.push(Reverse((now + timeout, id, attempts)));
                    continue;
                }
            }

            let more_to_send = !retransmit.is_empty() || pending.peek().is_some();
            let outstanding = !self.table.is_empty();
            if !more_to_send && !outstanding && now >= next_slot {
                break 'scan false;
            }

            let mut wake: Option<Duration> = None;
            let mut consider = |t: Duration| {
                if t > now {
                    wake = Some(wake.map_or(t, |w: Duration| w.min(t)));
                }
            };
            if more_to_send || !outstanding {
                consider(next_slot);
            }
            if let Some(Reverse((deadline, _, _))) = deadlines.peek() {
                consider(*deadline);
            }
            if let Some(d) = sink.next_deadline() {
                consider(start + d);
            }
            let wait = wake.map_or(Duration::from_millis(1), |w| w - now);

            match self.backend.receive(wait) {
                Ok(Some(dg)) => {
                    let now = self.backend.now();
                    match match_response(&dg.bytes, &self.table) {
                        MatchOutcome::Matched { probe_id, payload } => {
                            let o = self.table.remove(probe_id).expect("matched probe is outstanding");
                            summary.matched += 1;
                            let record = ProbeResponse {
                                target: o.target,
                                source: dg.source,
                                payload,
                                rtt: now.saturating_sub(o.last_sent),
                                at: now.saturating_sub(start),
                                probe_id,
                                port: o.kind.remote_port().map(|(p, _)| p),
                            };
                            if sink.on_response(record) == Flow::Stop {
                                break 'scan true;
                            }
                        }
                        MatchOutcome::Unsolicited(reason) => {
                            log::debug!("unsolicited datagram from {}: {:?}", dg.source, reason);
                            summary.unsolicited += 1;
                            self.unsolicited_total += 1;
                        }
                    }
                }
                Ok(None) => {}
                Err(e) => bail!(e),
            }
        };

        summary.finished_at = self.backend.now();
        if stop {
            summary.aborted = true;
        }
        summary.abandoned = in_scan.iter().filter(|id| self.table.get(**id).is_some()).count() as u64;
        for id in &in_scan {
            self.table.remove(*id);
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::{build_topology, HostSpec, Responder, ServiceSpec, TopologySpec};

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn hosts(n: u16) -> TopologySpec {
        TopologySpec {
            hosts: (1..=n)
                .map(|i| HostSpec::new(Address(a("2001:db8::").0 | u128::from(i)), 5))
                .collect(),
            ..TopologySpec::default()
        }
    }

    #[test]
    fn interval_rounds_up() {
        assert_eq!(RateLimit::new(100).unwrap().interval(), Duration::from_millis(10));
        assert_eq!(RateLimit::new(3).unwrap().interval(), Duration::from_nanos(333_333_334));
        assert_eq!(RateLimit::new(0), Err(SpecError::ZeroRate));
    }

    #[test]
    fn spec_validation() {
        assert_eq!(ProbeSpec::echo(0, 1), Err(SpecError::ZeroHopLimit));
        assert_eq!(ProbeSpec::syn(0), Err(SpecError::ZeroPort));
        assert_eq!(ProbeSpec::app(Transport::Tcp, 80, vec![], 0), Err(SpecError::ZeroReadLimit));
    }

    #[test]
    fn zero_targets_finish_immediately() {
        let net = build_topology(&TopologySpec::default()).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::default(), 1);
        let (out, summary) = s.collect(Vec::new()).unwrap();
        assert!(out.is_empty());
        assert_eq!(summary.probed, 0);
        assert!(summary.conserved());
    }

    #[test]
    fn replies_and_timeouts_are_conserved() {
        let net = build_topology(&hosts(20)).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(1000).unwrap(), 7);
        let spec = ProbeSpec::echo(64, s.payload_tag()).unwrap();
        let targets: Vec<Address> = (1..=40u128).map(|i| Address(a("2001:db8::").0 | i)).collect();
        let mut out = Vec::new();
        let summary = s.run_scan(targets.clone(), &spec, &mut out).unwrap();
        assert_eq!((summary.probed, summary.matched, summary.timeouts), (40, 20, 20));
        assert!(summary.conserved());
        // one retry for each silent target
        assert_eq!(summary.sent_packets, 60);
        let mut seen: Vec<Address> = out.iter().map(|r| r.target).collect();
        seen.sort();
        assert_eq!(seen, targets);
        for r in &out {
            let silent = r.target.0 & 0xff > 20;
            assert_eq!(r.payload.is_timeout(), silent, "{}", r.target);
        }
    }

    #[test]
    fn timing_override_replaces_probe_policy() {
        let net = build_topology(&hosts(2)).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(1000).unwrap(), 7).with_timing(Some(Duration::from_millis(250)), Some(3));
        let spec = ProbeSpec::echo(64, s.payload_tag()).unwrap();
        let targets: Vec<Address> = (1..=4u128).map(|i| Address(a("2001:db8::").0 | i)).collect();
        let started = s.now();
        let summary = s.run_scan(targets, &spec, &mut Vec::new()).unwrap();
        assert_eq!(summary.sent_packets, 2 + 2 * 4);
        assert!(s.now() - started < Duration::from_secs(2));
    }

    #[test]
    fn sends_respect_the_interval() {
        let net = build_topology(&hosts(5)).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(50).unwrap(), 2);
        let spec = ProbeSpec::echo(64, s.payload_tag()).unwrap();
        let targets: Vec<Address> = (1..=5u128).map(|i| Address(a("2001:db8::").0 | i)).collect();
        let (out, summary) = s
            .collect(targets.iter().map(|&t| Probe {
                target: t,
                spec: spec.clone(),
            }))
            .unwrap();
        assert_eq!(out.len(), 5);
        // five sends 20 ms apart, the last reply 20 ms after the last send
        assert_eq!(summary.elapsed(), Duration::from_millis(100));
    }

    #[test]
    fn sink_can_stop_a_scan() {
        let net = build_topology(&hosts(10)).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(10).unwrap(), 3);
        let spec = ProbeSpec::echo(64, s.payload_tag()).unwrap();
        let targets: Vec<Address> = (1..=10u128).map(|i| Address(a("2001:db8::").0 | i)).collect();
        let mut n = 0;
        let mut sink = |_r: ProbeResponse| {
            n += 1;
            if n == 3 {
                Flow::Stop
            } else {
                Flow::Continue
            }
        };
        let summary = s.run_scan(targets, &spec, &mut sink).unwrap();
        assert!(summary.aborted);
        assert_eq!(summary.matched, 3);
        assert!(summary.conserved());
        assert!(summary.probed < 10);
    }

    #[test]
    fn app_exchange_returns_banner() {
        let host = a("2001:db8::1");
        let spec = TopologySpec {
            hosts: vec![HostSpec::new(host, 3).service(ServiceSpec::tcp(
                22,
                Responder::Banner {
                    text: "SSH-2.0-dropbear\r\n".into(),
                },
            ))],
            ..TopologySpec::default()
        };
        let net = build_topology(&spec).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::default(), 4);
        let probe = ProbeSpec::app(Transport::Tcp, 22, Vec::new(), 4096).unwrap();
        let (out, _) = s
            .collect([Probe {
                target: host,
                spec: probe,
            }])
            .unwrap();
        assert_eq!(out[0].port, Some(22));
        match &out[0].payload {
            ResponsePayload::AppPayload { body_prefix, .. } => assert_eq!(body_prefix, b"SSH-2.0-dropbear\r\n"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn payload_serializes_with_kind_tag() {
        let p = ResponsePayload::AppPayload {
            status_line: "HTTP/1.1 200 OK".into(),
            headers: vec![],
            body_prefix: vec![0xde, 0xad],
        };
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"kind\":\"app_payload\"") && json.contains("\"dead\""));
        assert_eq!(serde_json::from_str::<ResponsePayload>(&json).unwrap(), p);
    }
}
