//! IPv6 packet encoding shared by every backend.
//!
//! Backends exchange whole IPv6 packets. Application exchanges (a request
//! written to a TCP connection or UDP socket and the bytes read back) are
//! carried as a single TCP data segment or UDP datagram, so the live and
//! simulated backends present byte-identical datagrams to the matcher.

use thiserror::Error;

use crate::prefix::Address;

pub const IPV6_HEADER_LEN: usize = 40;
pub const NH_TCP: u8 = 6;
pub const NH_UDP: u8 = 17;
pub const NH_ICMPV6: u8 = 58;

pub const ICMP_DEST_UNREACHABLE: u8 = 1;
pub const ICMP_TIME_EXCEEDED: u8 = 3;
pub const ICMP_ECHO_REQUEST: u8 = 128;
pub const ICMP_ECHO_REPLY: u8 = 129;

/// RFC 4443 limits an error message so the whole packet fits the 1280-byte minimum MTU.
pub const MIN_MTU: usize = 1280;

pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("not an IPv6 packet (version {0})")]
    NotIpv6(u8),
    #[error("unsupported next header {0}")]
    Unsupported(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpMessage {
    pub icmp_type: u8,
    pub code: u8,
    /// The four type-specific bytes after the checksum (identifier/sequence for echo).
    pub rest: [u8; 4],
    pub data: Vec<u8>,
}

impl IcmpMessage {
    pub fn echo_ident(&self) -> u16 {
        u16::from_be_bytes([self.rest[0], self.rest[1]])
    }

    pub fn echo_seq(&self) -> u16 {
        u16::from_be_bytes([self.rest[2], self.rest[3]])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl TcpSegment {
    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag == flag
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpDatagram {
    pub src_port: u16,
    pub dst_port: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Icmp(IcmpMessage),
    Tcp(TcpSegment),
    Udp(UdpDatagram),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: Address,
    pub dst: Address,
    pub hop_limit: u8,
    pub body: Body,
}

fn checksum(src: Address, dst: Address, next_header: u8, upper: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut add = |bytes: &[u8]| {
        for chunk in bytes.chunks(2) {
            let word = if chunk.len() == 2 {
                u16::from_be_bytes([chunk[0], chunk[1]])
            } else {
                u16::from_be_bytes([chunk[0], 0])
            };
            sum = sum.wrapping_add(u32::from(word));
        }
    };
    add(&src.octets());
    add(&dst.octets());
    add(&(upper.len() as u32).to_be_bytes());
    add(&[0, 0, 0, next_header]);
    add(upper);
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

impl Packet {
    pub fn next_header(&self) -> u8 {
        match self.body {
            Body::Icmp(_) => NH_ICMPV6,
            Body::Tcp(_) => NH_TCP,
            Body::Udp(_) => NH_UDP,
        }
    }

    /// Encodes the upper-layer message with its checksum filled in.
    pub fn encode_upper(&self) -> Vec<u8> {
        let (mut upper, csum_at) = match &self.body {
            Body::Icmp(m) => {
                let mut b = vec![m.icmp_type, m.code, 0, 0];
                b.extend_from_slice(&m.rest);
                b.extend_from_slice(&m.data);
                (b, 2)
            }
            Body::Tcp(t) => {
                let mut b = Vec::with_capacity(20 + t.payload.len());
                b.extend_from_slice(&t.src_port.to_be_bytes());
                b.extend_from_slice(&t.dst_port.to_be_bytes());
                b.extend_from_slice(&t.seq.to_be_bytes());
                b.extend_from_slice(&t.ack.to_be_bytes());
                b.push(5 << 4);
                b.push(t.flags);
                b.extend_from_slice(&65535u16.to_be_bytes());
                b.extend_from_slice(&[0, 0, 0, 0]);
                b.extend_from_slice(&t.payload);
                (b, 16)
            }
            Body::Udp(u) => {
                let len = (8 + u.payload.len()) as u16;
                let mut b = Vec::with_capacity(len as usize);
                b.extend_from_slice(&u.src_port.to_be_bytes());
                b.extend_from_slice(&u.dst_port.to_be_bytes());
                b.extend_from_slice(&len.to_be_bytes());
                b.extend_from_slice(&[0, 0]);
                b.extend_from_slice(&u.payload);
                (b, 6)
            }
        };
        let mut c = checksum(self.src, self.dst, self.next_header(), &upper);
        if c == 0 && matches!(self.body, Body::Udp(_)) {
            c = 0xffff;
        }
        upper[csum_at..csum_at + 2].copy_from_slice(&c.to_be_bytes());
        upper
    }

    pub fn encode(&self) -> Vec<u8> {
        let upper = self.encode_upper();
        let mut out = Vec::with_capacity(IPV6_HEADER_LEN + upper.len());
        out.extend_from_slice(&[0x60, 0, 0, 0]);
        out.extend_from_slice(&(upper.len() as u16).to_be_bytes());
        out.push(self.next_header());
        out.push(self.hop_limit);
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        out.extend_from_slice(&upper);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
        let header = Ipv6Header::parse(bytes)?;
        let upper = &bytes[IPV6_HEADER_LEN..];
        if upper.len() < header.payload_len as usize {
            return Err(WireError::Truncated("payload"));
        }
        let upper = &upper[..header.payload_len as usize];
        let body = decode_upper(header.next_header, upper)?;
        Ok(Packet {
            src: header.src,
            dst: header.dst,
            hop_limit: header.hop_limit,
            body,
        })
    }

    pub fn echo_request(src: Address, dst: Address, hop_limit: u8, ident: u16, seq: u16, data: Vec<u8>) -> Packet {
        let mut rest = [0u8; 4];
        rest[..2].copy_from_slice(&ident.to_be_bytes());
        rest[2..].copy_from_slice(&seq.to_be_bytes());
        Packet {
            src,
            dst,
            hop_limit,
            body: Body::Icmp(IcmpMessage {
                icmp_type: ICMP_ECHO_REQUEST,
                code: 0,
                rest,
                data,
            }),
        }
    }

    /// An ICMPv6 error from `reporter` quoting as much of `original` as fits.
    pub fn icmp_error(reporter: Address, to: Address, icmp_type: u8, code: u8, original: &[u8]) -> Packet {
        let room = MIN_MTU - IPV6_HEADER_LEN - 8;
        Packet {
            src: reporter,
            dst: to,
            hop_limit: 64,
            body: Body::Icmp(IcmpMessage {
                icmp_type,
                code,
                rest: [0; 4],
                data: original[..original.len().min(room)].to_vec(),
            }),
        }
    }

    pub fn tcp(src: Address, dst: Address, hop_limit: u8, seg: TcpSegment) -> Packet {
        Packet {
            src,
            dst,
            hop_limit,
            body: Body::Tcp(seg),
        }
    }

    pub fn udp(src: Address, dst: Address, hop_limit: u8, dgram: UdpDatagram) -> Packet {
        Packet {
            src,
            dst,
            hop_limit,
            body: Body::Udp(dgram),
        }
    }
}

/// Fixed IPv6 header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv6Header {
    pub payload_len: u16,
    pub next_header: u8,
    pub hop_limit: u8,
    pub src: Address,
    pub dst: Address,
}

impl Ipv6Header {
    pub fn parse(bytes: &[u8]) -> Result<Ipv6Header, WireError> {
        if bytes.len() < IPV6_HEADER_LEN {
            return Err(WireError::Truncated("ipv6 header"));
        }
        let version = bytes[0] >> 4;
        if version != 6 {
            return Err(WireError::NotIpv6(version));
        }
        let mut src = [0u8; 16];
        let mut dst = [0u8; 16];
        src.copy_from_slice(&bytes[8..24]);
        dst.copy_from_slice(&bytes[24..40]);
        Ok(Ipv6Header {
            payload_len: u16::from_be_bytes([bytes[4], bytes[5]]),
            next_header: bytes[6],
            hop_limit: bytes[7],
            src: Address::from_octets(src),
            dst: Address::from_octets(dst),
        })
    }
}

fn decode_upper(next_header: u8, upper: &[u8]) -> Result<Body, WireError> {
    match next_header {
        NH_ICMPV6 => {
            if upper.len() < 8 {
                return Err(WireError::Truncated("icmpv6"));
            }
            Ok(Body::Icmp(IcmpMessage {
                icmp_type: upper[0],
                code: upper[1],
                rest: [upper[4], upper[5], upper[6], upper[7]],
                data: upper[8..].to_vec(),
            }))
        }
        NH_TCP => {
            if upper.len() < 20 {
                return Err(WireError::Truncated("tcp"));
            }
            let data_off = usize::from(upper[12] >> 4) * 4;
            if data_off < 20 || upper.len() < data_off {
                return Err(WireError::Truncated("tcp options"));
            }
            Ok(Body::Tcp(TcpSegment {
                src_port: u16::from_be_bytes([upper[0], upper[1]]),
                dst_port: u16::from_be_bytes([upper[2], upper[3]]),
                seq: u32::from_be_bytes([upper[4], upper[5], upper[6], upper[7]]),
                ack: u32::from_be_bytes([upper[8], upper[9], upper[10], upper[11]]),
                flags: upper[13],
                payload: upper[data_off..].to_vec(),
            }))
        }
        NH_UDP => {
            if upper.len() < 8 {
                return Err(WireError::Truncated("udp"));
            }
            Ok(Body::Udp(UdpDatagram {
                src_port: u16::from_be_bytes([upper[0], upper[1]]),
                dst_port: u16::from_be_bytes([upper[2], upper[3]]),
                payload: upper[8..].to_vec(),
            }))
        }
        other => Err(WireError::Unsupported(other)),
    }
}

/// The invoking packet quoted inside an ICMPv6 error. Only the leading bytes
/// of the upper layer are guaranteed to be present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quoted {
    pub header: Ipv6Header,
    pub upper: Vec<u8>,
}

impl Quoted {
    pub fn parse(data: &[u8]) -> Result<Quoted, WireError> {
        let header = Ipv6Header::parse(data)?;
        let upper = data[IPV6_HEADER_LEN..].to_vec();
        if upper.len() < 8 {
            return Err(WireError::Truncated("quoted upper layer"));
        }
        Ok(Quoted { header, upper })
    }

    /// `(identifier, sequence, data)` if the quoted packet is an echo request.
    pub fn echo(&self) -> Option<(u16, u16, &[u8])> {
        (self.header.next_header == NH_ICMPV6 && self.upper[0] == ICMP_ECHO_REQUEST).then(|| {
            (
                u16::from_be_bytes([self.upper[4], self.upper[5]]),
                u16::from_be_bytes([self.upper[6], self.upper[7]]),
                &self.upper[8..],
            )
        })
    }

    /// `(source port, destination port)` for quoted TCP or UDP.
    pub fn ports(&self) -> Option<(u16, u16)> {
        matches!(self.header.next_header, NH_TCP | NH_UDP).then(|| {
            (
                u16::from_be_bytes([self.upper[0], self.upper[1]]),
                u16::from_be_bytes([self.upper[2], self.upper[3]]),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn echo_roundtrip_and_checksum() {
        let pkt = Packet::echo_request(a("fd00::1"), a("2001:db8::1"), 32, 0x1234, 7, vec![1, 2, 3]);
        let bytes = pkt.encode();
        assert_eq!(bytes.len(), 40 + 8 + 3);
        assert_eq!(bytes[7], 32);
        assert_eq!(Packet::decode(&bytes).unwrap(), pkt);
        // checksum over pseudo-header + message folds to zero
        let upper = &bytes[40..];
        assert_eq!(checksum(pkt.src, pkt.dst, NH_ICMPV6, upper), 0);
    }

    #[test]
    fn tcp_and_udp_roundtrip() {
        let seg = TcpSegment {
            src_port: 40000,
            dst_port: 80,
            seq: 0xdead_beef,
            ack: 0,
            flags: tcp_flags::SYN,
            payload: vec![],
        };
        let pkt = Packet::tcp(a("fd00::1"), a("2001:db8::2"), 64, seg);
        assert_eq!(Packet::decode(&pkt.encode()).unwrap(), pkt);
        let dg = UdpDatagram {
            src_port: 5353,
            dst_port: 53,
            payload: b"query".to_vec(),
        };
        let pkt = Packet::udp(a("fd00::1"), a("2001:db8::2"), 64, dg);
        let bytes = pkt.encode();
        assert_eq!(checksum(pkt.src, pkt.dst, NH_UDP, &bytes[40..]), 0);
        assert_eq!(Packet::decode(&bytes).unwrap(), pkt);
    }

    #[test]
    fn time_exceeded_quotes_original() {
        let orig = Packet::echo_request(a("fd00::1"), a("2001:db8::99"), 2, 9, 10, vec![0xaa, 0xbb]);
        let err = Packet::icmp_error(a("2001:db8:ffff::2"), a("fd00::1"), ICMP_TIME_EXCEEDED, 0, &orig.encode());
        let decoded = Packet::decode(&err.encode()).unwrap();
        let Body::Icmp(m) = decoded.body else { panic!() };
        let q = Quoted::parse(&m.data).unwrap();
        assert_eq!(q.header.dst, a("2001:db8::99"));
        assert_eq!(q.echo(), Some((9, 10, &[0xaa, 0xbb][..])));
        assert_eq!(q.ports(), None);
    }

    #[test]
    fn error_quote_is_capped_at_min_mtu() {
        let orig = Packet::udp(
            a("fd00::1"),
            a("2001:db8::2"),
            64,
            UdpDatagram {
                src_port: 1,
                dst_port: 2,
                payload: vec![0; 4000],
            },
        );
        let err = Packet::icmp_error(a("2001:db8::2"), a("fd00::1"), 1, 4, &orig.encode());
        assert_eq!(err.encode().len(), MIN_MTU);
    }

    #[test]
    fn truncation_is_reported() {
        assert_eq!(Packet::decode(&[0x60; 10]), Err(WireError::Truncated("ipv6 header")));
        let mut bytes = Packet::echo_request(a("::1"), a("::2"), 1, 0, 0, vec![]).encode();
        bytes.truncate(44);
        assert!(matches!(Packet::decode(&bytes), Err(WireError::Truncated(_))));
        bytes[0] = 0x40;
        assert_eq!(Packet::decode(&bytes), Err(WireError::NotIpv6(4)));
    }
}
