//! Matching inbound datagrams to outstanding probes.

use std::collections::HashMap;
use std::time::Duration;

use super::{ProbeId, ProbeKind, ProbeSpec, ResponsePayload, Transport};
use crate::prefix::Address;
use crate::wire::{self, tcp_flags, Body, Packet, Quoted};

/// Key for connection-style probes: (remote address, remote port, local port, protocol).
type FlowKey = (Address, u16, u16, u8);

#[derive(Debug, Clone)]
pub struct Outstanding {
    pub target: Address,
    pub kind: ProbeKind,
    pub timeout: Duration,
    pub retries: u8,
    pub bytes: Vec<u8>,
    pub attempts: u8,
    pub first_sent: Duration,
    pub last_sent: Duration,
    local_port: u16,
    isn: u32,
}

/// Why a datagram could not be attributed to a probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnsolicitedReason {
    Malformed(String),
    UnknownTag,
    UnknownFlow,
    BadAck,
    WrongSource,
    Unexpected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchOutcome {
    Matched { probe_id: ProbeId, payload: ResponsePayload },
    Unsolicited(UnsolicitedReason),
}

/// Outstanding probes keyed by id, plus a flow index for TCP/UDP.
#[derive(Debug, Clone)]
pub struct CorrelationTable {
    ident: u16,
    tag: u16,
    key: u32,
    by_id: HashMap<ProbeId, Outstanding>,
    by_flow: HashMap<FlowKey, ProbeId>,
}

impl CorrelationTable {
    pub fn new(ident: u16, tag: u16) -> Self {
        CorrelationTable {
            ident,
            tag,
            key: (u32::from(ident) << 16 | u32::from(tag)).wrapping_mul(0x9e37_79b9),
            by_id: HashMap::new(),
            by_flow: HashMap::new(),
        }
    }

    pub fn ident(&self) -> u16 {
        self.ident
    }

    pub fn tag(&self) -> u16 {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: ProbeId) -> Option<&Outstanding> {
        self.by_id.get(&id)
    }

    pub fn get_mut(&mut self, id: ProbeId) -> Option<&mut Outstanding> {
        self.by_id.get_mut(&id)
    }

    fn local_port(id: ProbeId) -> u16 {
        1024 + (id.0 % 64_000) as u16
    }

    fn isn(&self, id: ProbeId) -> u32 {
        id.0.wrapping_mul(0x01000193) ^ self.key
    }

    /// Builds the wire bytes for a probe and records it as outstanding.
    pub fn insert(&mut self, id: ProbeId, target: Address, spec: &ProbeSpec, source: Address, now: Duration) -> Vec<u8> {
        let kind = spec.kind.clone();
        let local_port = Self::local_port(id);
        let isn = self.isn(id);
        let packet = match &kind {
            ProbeKind::Icmp6Echo { hop_limit, payload_tag } => {
                let mut data = Vec::with_capacity(6);
                data.extend_from_slice(&payload_tag.to_be_bytes());
                data.extend_from_slice(&id.0.to_be_bytes());
                Packet::echo_request(source, target, *hop_limit, self.ident, id.0 as u16, data)
            }
            ProbeKind::TcpSyn { port } => Packet::tcp(
                source,
                target,
                64,
                wire::TcpSegment {
                    src_port: local_port,
                    dst_port: *port,
                    seq: isn,
                    ack: 0,
                    flags: tcp_flags::SYN,
                    payload: Vec::new(),
                },
            ),
            ProbeKind::AppRequest {
                transport: Transport::Tcp,
                port,
                request,
                ..
            } => Packet::tcp(
                source,
                target,
                64,
                wire::TcpSegment {
                    src_port: local_port,
                    dst_port: *port,
                    seq: isn,
                    ack: 0,
                    flags: tcp_flags::PSH | tcp_flags::ACK,
                    payload: request.clone(),
                },
            ),
            ProbeKind::AppRequest {
                transport: Transport::Udp,
                port,
                request,
                ..
            } => Packet::udp(
                source,
                target,
                64,
                wire::UdpDatagram {
                    src_port: local_port,
                    dst_port: *port,
                    payload: request.clone(),
                },
            ),
        };
        if let Some((port, proto)) = kind.remote_port() {
            self.by_flow.insert((target, port, local_port, proto), id);
        }
        let bytes = packet.encode();
        self.by_id.insert(
            id,
            Outstanding {
                target,
                kind,
                timeout: spec.timeout,
                retries: spec.retries,
                bytes: bytes.clone(),
                attempts: 1,
                first_sent: now,
                last_sent: now,
                local_port,
                isn,
            },
        );
        bytes
    }

    pub fn remove(&mut self, id: ProbeId) -> Option<Outstanding> {
        let o = self.by_id.remove(&id)?;
        if let Some((port, proto)) = o.kind.remote_port() {
            self.by_flow.remove(&(o.target, port, o.local_port, proto));
        }
        Some(o)
    }

    fn expected_ack(o: &Outstanding) -> u32 {
        match &o.kind {
            ProbeKind::TcpSyn { .. } => o.isn.wrapping_add(1),
            ProbeKind::AppRequest { request, .. } => o.isn.wrapping_add(request.len() as u32),
            ProbeKind::Icmp6Echo { .. } => 0,
        }
    }
}

/// Attributes a datagram to an outstanding probe. Never drops silently:
/// anything that does not match comes back as `Unsolicited` with a reason.
pub fn match_response(datagram: &[u8], table: &CorrelationTable) -> MatchOutcome {
    use MatchOutcome::*;
    let packet = match Packet::decode(datagram) {
        Ok(p) => p,
        Err(e) => return Unsolicited(UnsolicitedReason::Malformed(e.to_string())),
    };
    match &packet.body {
        Body::Icmp(m) if m.icmp_type == wire::ICMP_ECHO_REPLY => {
            if m.echo_ident() != table.ident {
                return Unsolicited(UnsolicitedReason::UnknownTag);
            }
            let Some(id) = tagged_id(&m.data, table.tag) else {
                return Unsolicited(UnsolicitedReason::UnknownTag);
            };
            match table.get(id) {
                Some(o) if o.target == packet.src => Matched {
                    probe_id: id,
                    payload: ResponsePayload::Icmp {
                        icmp_type: m.icmp_type,
                        icmp_code: m.code,
                        echoed_hop_limit: packet.hop_limit,
                    },
                },
                Some(_) => Unsolicited(UnsolicitedReason::WrongSource),
                None => Unsolicited(UnsolicitedReason::UnknownTag),
            }
        }
        Body::Icmp(m) if m.icmp_type < 128 => {
            let quoted = match Quoted::parse(&m.data) {
                Ok(q) => q,
                Err(e) => return Unsolicited(UnsolicitedReason::Malformed(format!("quoted: {e}"))),
            };
            let id = if let Some((ident, _seq, data)) = quoted.echo() {
                if ident != table.ident {
                    return Unsolicited(UnsolicitedReason::UnknownTag);
                }
                match tagged_id(data, table.tag) {
                    Some(id) => id,
                    None => return Unsolicited(UnsolicitedReason::UnknownTag),
                }
            } else if let Some((local, remote)) = quoted.ports() {
                let key = (quoted.header.dst, remote, local, quoted.header.next_header);
                match table.by_flow.get(&key) {
                    Some(id) => *id,
                    None => return Unsolicited(UnsolicitedReason::UnknownFlow),
                }
            } else {
                return Unsolicited(UnsolicitedReason::Unexpected);
            };
            match table.get(id) {
                Some(o) if o.target == quoted.header.dst => Matched {
                    probe_id: id,
                    payload: ResponsePayload::Icmp {
                        icmp_type: m.icmp_type,
                        icmp_code: m.code,
                        echoed_hop_limit: quoted.header.hop_limit,
                    },
                },
                Some(_) => Unsolicited(UnsolicitedReason::WrongSource),
                None => Unsolicited(UnsolicitedReason::UnknownTag),
            }
        }
        Body::Icmp(_) => Unsolicited(UnsolicitedReason::Unexpected),
        Body::Tcp(seg) => {
            let key = (packet.src, seg.src_port, seg.dst_port, wire::NH_TCP);
            let Some(&id) = table.by_flow.get(&key) else {
                return Unsolicited(UnsolicitedReason::UnknownFlow);
            };
            let o = &table.by_id[&id];
            if seg.ack != CorrelationTable::expected_ack(o) {
                return Unsolicited(UnsolicitedReason::BadAck);
            }
            let payload = match &o.kind {
                ProbeKind::TcpSyn { .. } if seg.has(tcp_flags::SYN | tcp_flags::ACK) => ResponsePayload::SynAck,
                _ if seg.has(tcp_flags::RST) => ResponsePayload::Rst,
                ProbeKind::AppRequest { read_limit, .. } => ResponsePayload::from_app_bytes(&seg.payload, *read_limit),
                _ => return Unsolicited(UnsolicitedReason::Unexpected),
            };
            Matched { probe_id: id, payload }
        }
        Body::Udp(dg) => {
            let key = (packet.src, dg.src_port, dg.dst_port, wire::NH_UDP);
            let Some(&id) = table.by_flow.get(&key) else {
                return Unsolicited(UnsolicitedReason::UnknownFlow);
            };
            let read_limit = match &table.by_id[&id].kind {
                ProbeKind::AppRequest { read_limit, .. } => *read_limit,
                _ => return Unsolicited(UnsolicitedReason::Unexpected),
            };
            Matched {
                probe_id: id,
                payload: ResponsePayload::from_app_bytes(&dg.payload, read_limit),
            }
        }
    }
}

fn tagged_id(data: &[u8], tag: u16) -> Option<ProbeId> {
    if data.len() < 6 || u16::from_be_bytes([data[0], data[1]]) != tag {
        return None;
    }
    Some(ProbeId(u32::from_be_bytes([data[2], data[3], data[4], data[5]])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{TcpSegment, ICMP_TIME_EXCEEDED};

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    const ME: &str = "fd00::1";

    fn table() -> CorrelationTable {
        CorrelationTable::new(0x5150, 0xbeef)
    }

    #[test]
    fn time_exceeded_matches_by_quoted_tag() {
        let mut t = table();
        let target = a("2001:db8::99");
        let bytes = t.insert(
            ProbeId(42),
            target,
            &ProbeSpec::echo(32, 0xbeef).unwrap(),
            a(ME),
            Duration::ZERO,
        );
        let te = Packet::icmp_error(a("2001:db8::1"), a(ME), ICMP_TIME_EXCEEDED, 0, &bytes).encode();
        match match_response(&te, &t) {
            MatchOutcome::Matched { probe_id, payload } => {
                assert_eq!(probe_id, ProbeId(42));
                assert!(matches!(
                    payload,
                    ResponsePayload::Icmp {
                        icmp_type: 3,
                        icmp_code: 0,
                        ..
                    }
                ));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_tag_is_unsolicited() {
        let mut t = table();
        t.insert(
            ProbeId(1),
            a("2001:db8::1"),
            &ProbeSpec::echo(32, 0xbeef).unwrap(),
            a(ME),
            Duration::ZERO,
        );
        let mut foreign = table();
        let bytes = foreign.insert(
            ProbeId(777),
            a("2001:db8::1"),
            &ProbeSpec::echo(32, 0xbeef).unwrap(),
            a(ME),
            Duration::ZERO,
        );
        let te = Packet::icmp_error(a("2001:db8::fe"), a(ME), 3, 0, &bytes).encode();
        assert_eq!(
            match_response(&te, &t),
            MatchOutcome::Unsolicited(UnsolicitedReason::UnknownTag)
        );
    }

    #[test]
    fn syn_ack_requires_correct_ack() {
        let mut t = table();
        let target = a("2001:db8::5");
        let bytes = t.insert(ProbeId(9), target, &ProbeSpec::syn(11434).unwrap(), a(ME), Duration::ZERO);
        let Body::Tcp(syn) = Packet::decode(&bytes).unwrap().body else {
            panic!()
        };
        let reply = |ack| {
            Packet::tcp(
                target,
                a(ME),
                64,
                TcpSegment {
                    src_port: 11434,
                    dst_port: syn.src_port,
                    seq: 1,
                    ack,
                    flags: tcp_flags::SYN | tcp_flags::ACK,
                    payload: vec![],
                },
            )
            .encode()
        };
        assert!(matches!(
            match_response(&reply(syn.seq.wrapping_add(1)), &t),
            MatchOutcome::Matched {
                payload: ResponsePayload::SynAck,
                ..
            }
        ));
        assert_eq!(
            match_response(&reply(syn.seq.wrapping_add(7)), &t),
            MatchOutcome::Unsolicited(UnsolicitedReason::BadAck)
        );
    }

    #[test]
    fn truncated_datagram_is_unsolicited_with_reason() {
        let t = table();
        assert!(matches!(
            match_response(&[0x60, 0, 0], &t),
            MatchOutcome::Unsolicited(UnsolicitedReason::Malformed(_))
        ));
    }

    #[test]
    fn removal_clears_flow_index() {
        let mut t = table();
        let target = a("2001:db8::5");
        let bytes = t.insert(ProbeId(3), target, &ProbeSpec::syn(22).unwrap(), a(ME), Duration::ZERO);
        t.remove(ProbeId(3)).unwrap();
        let Body::Tcp(syn) = Packet::decode(&bytes).unwrap().body else {
            panic!()
        };
        let reply = Packet::tcp(
            target,
            a(ME),
            64,
            TcpSegment {
                src_port: 22,
                dst_port: syn.src_port,
                seq: 1,
                ack: syn.seq.wrapping_add(1),
                flags: tcp_flags::SYN | tcp_flags::ACK,
                payload: vec![],
            },
        );
        assert_eq!(
            match_response(&reply.encode(), &t),
            MatchOutcome::Unsolicited(UnsolicitedReason::UnknownFlow)
        );
        assert!(t.is_empty());
    }
}
