//! Wall-clock backend over a host link.
//!
//! `LiveBackend` owns the clock and the inbound queue; the link behind it
//! moves bytes. The raw-socket link needs `CAP_NET_RAW` and is only compiled
//! with the `live` feature. `ReflectorLink` is an in-memory link that answers
//! probes immediately, used to exercise wall-clock pacing without privileges.

use std::io;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::backend::{Backend, BackendError, Datagram};
use crate::prefix::Address;
use crate::wire::{self, tcp_flags, Body, Packet, TcpSegment};

/// Moves raw IPv6 packets between the engine and the network.
pub trait LinkIo: Send {
    /// Starts delivering inbound packets into `inbox`.
    fn start(&mut self, inbox: Sender<Datagram>) -> io::Result<()>;

    fn transmit(&mut self, packet: &[u8], destination: Address) -> io::Result<()>;
}

pub struct LiveBackend<L: LinkIo> {
    link: L,
    local: Address,
    base: Duration,
    epoch: Instant,
    inbox: Receiver<Datagram>,
    _keepalive: Sender<Datagram>,
}

impl<L: LinkIo> LiveBackend<L> {
    pub fn open(mut link: L, local: Address) -> Result<Self, BackendError> {
        let (tx, rx) = mpsc::channel();
        link.start(tx.clone())?;
        Ok(LiveBackend {
            link,
            local,
            base: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default(),
            epoch: Instant::now(),
            inbox: rx,
            _keepalive: tx,
        })
    }

    pub fn link(&self) -> &L {
        &self.link
    }
}

impl<L: LinkIo> Backend for LiveBackend<L> {
    fn name(&self) -> &str {
        "live"
    }

    fn local_address(&self) -> Address {
        self.local
    }

    fn now(&self) -> Duration {
        self.base + self.epoch.elapsed()
    }

    fn send(&mut self, packet: &[u8], destination: Address) -> Result<(), BackendError> {
        self.link.transmit(packet, destination).map_err(BackendError::Io)
    }

    fn receive(&mut self, max_wait: Duration) -> Result<Option<Datagram>, BackendError> {
        match self.inbox.recv_timeout(max_wait) {
            Ok(d) => Ok(Some(d)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BackendError::Closed),
        }
    }
}

/// Answers echo requests with replies and SYNs with SYN-ACKs from the
/// addressed target, and records every transmit instant.
#[derive(Default)]
pub struct ReflectorLink {
    inbox: Option<Sender<Datagram>>,
    sends: Arc<Mutex<Vec<Instant>>>,
}

impl ReflectorLink {
    pub fn new() -> Self {
        ReflectorLink::default()
    }

    /// Shared log of transmit instants.
    pub fn send_log(&self) -> Arc<Mutex<Vec<Instant>>> {
        Arc::clone(&self.sends)
    }
}

impl LinkIo for ReflectorLink {
    fn start(&mut self, inbox: Sender<Datagram>) -> io::Result<()> {
        self.inbox = Some(inbox);
        Ok(())
    }

    fn transmit(&mut self, packet: &[u8], destination: Address) -> io::Result<()> {
        self.sends.lock().unwrap().push(Instant::now());
        let Ok(p) = Packet::decode(packet) else {
            return Ok(());
        };
        let reply = match p.body {
            Body::Icmp(m) if m.icmp_type == wire::ICMP_ECHO_REQUEST => Packet {
                src: destination,
                dst: p.src,
                hop_limit: 64,
                body: Body::Icmp(wire::IcmpMessage {
                    icmp_type: wire::ICMP_ECHO_REPLY,
                    ..m
                }),
            },
            Body::Tcp(seg) if seg.has(tcp_flags::SYN) => Packet::tcp(
                destination,
                p.src,
                64,
                TcpSegment {
                    src_port: seg.dst_port,
                    dst_port: seg.src_port,
                    seq: 1,
                    ack: seg.seq.wrapping_add(1),
                    flags: tcp_flags::SYN | tcp_flags::ACK,
                    payload: Vec::new(),
                },
            ),
            _ => return Ok(()),
        };
        if let Some(tx) = &self.inbox {
            let _ = tx.send(Datagram {
                bytes: reply.encode(),
                source: destination,
            });
        }
        Ok(())
    }
}

#[cfg(feature = "live")]
pub use raw::{open_live_backend, RawSocketLink};

#[cfg(feature = "live")]
mod raw {
    use std::io::{Read, Write};
    use std::mem::MaybeUninit;
    use std::net::{Ipv6Addr, SocketAddr, SocketAddrV6, TcpStream, UdpSocket};
    use std::sync::mpsc::Sender;
    use std::thread;
    use std::time::Duration;

    use socket2::{Domain, Protocol, SockAddr, Socket, Type};

    use super::{Datagram, LinkIo, LiveBackend};
    use crate::engine::backend::{Backend, BackendConfig, BackendError};
    use crate::prefix::Address;
    use crate::wire::{self, tcp_flags, Body, Packet, TcpSegment, UdpDatagram};

    const APP_TIMEOUT: Duration = Duration::from_secs(5);

    /// Raw ICMPv6 and TCP sockets plus ordinary connections for application exchanges.
    pub struct RawSocketLink {
        local: Address,
        icmp: Socket,
        tcp: Socket,
        inbox: Option<Sender<Datagram>>,
    }

    impl RawSocketLink {
        pub fn new(local: Address) -> std::io::Result<Self> {
            Ok(RawSocketLink {
                local,
                icmp: Socket::new(Domain::IPV6, Type::RAW, Some(Protocol::ICMPV6))?,
                tcp: Socket::new(Domain::IPV6, Type::RAW, Some(Protocol::TCP))?,
                inbox: None,
            })
        }

        fn spawn_reader(&self, socket: &Socket, next_header: u8, tx: Sender<Datagram>) -> std::io::Result<()> {
            let socket = socket.try_clone()?;
            let local = self.local;
            thread::spawn(move || {
                let mut buf = vec![MaybeUninit::<u8>::uninit(); 65_535];
                while let Ok((n, from)) = socket.recv_from(&mut buf) {
                    // SAFETY: recv_from initialized the first n bytes
                    let bytes: Vec<u8> = buf[..n].iter().map(|b| unsafe { b.assume_init() }).collect();
                    let Some(src) = from.as_socket_ipv6().map(|a| Address::from(*a.ip())) else {
                        continue;
                    };
                    let Ok(packet) = reassemble(src, local, next_header, &bytes) else {
                        continue;
                    };
                    if tx
                        .send(Datagram {
                            bytes: packet,
                            source: src,
                        })
                        .is_err()
                    {
                        break;
                    }
                }
            });
            Ok(())
        }
    }

    /// Raw IPv6 sockets deliver the upper layer only; rebuild the full packet.
    fn reassemble(src: Address, dst: Address, next_header: u8, upper: &[u8]) -> Result<Vec<u8>, wire::WireError> {
        let mut raw = Vec::with_capacity(40 + upper.len());
        raw.extend_from_slice(&[0x60, 0, 0, 0]);
        raw.extend_from_slice(&(upper.len() as u16).to_be_bytes());
        raw.push(next_header);
        raw.push(64);
        raw.extend_from_slice(&src.octets());
        raw.extend_from_slice(&dst.octets());
        raw.extend_from_slice(upper);
        Packet::decode(&raw)?;
        Ok(raw)
    }

    fn sockaddr(addr: Address, port: u16) -> SocketAddr {
        SocketAddr::V6(SocketAddrV6::new(Ipv6Addr::from(addr.0), port, 0, 0))
    }

    fn app_exchange_tcp(dst: Address, seg: TcpSegment, local: Address, tx: Sender<Datagram>) {
        let ack = seg.seq.wrapping_add(seg.payload.len() as u32);
        let reply = |flags, payload| {
            Packet::tcp(
                dst,
                local,
                64,
                TcpSegment {
                    src_port: seg.dst_port,
                    dst_port: seg.src_port,
                    seq: 1,
                    ack,
                    flags,
                    payload,
                },
            )
            .encode()
        };
        let bytes = match TcpStream::connect_timeout(&sockaddr(dst, seg.dst_port), APP_TIMEOUT) {
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => reply(tcp_flags::RST | tcp_flags::ACK, Vec::new()),
            Err(_) => return,
            Ok(mut stream) => {
                let _ = stream.set_read_timeout(Some(APP_TIMEOUT));
                if !seg.payload.is_empty() && stream.write_all(&seg.payload).is_err() {
                    return;
                }
                let mut got = Vec::new();
                let mut chunk = [0u8; 4096];
                while got.len() < 64 * 1024 {
                    match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => got.extend_from_slice(&chunk[..n]),
                    }
                }
                let flags = if got.is_empty() {
                    tcp_flags::FIN | tcp_flags::ACK
                } else {
                    tcp_flags::PSH | tcp_flags::ACK
                };
                reply(flags, got)
            }
        };
        let _ = tx.send(Datagram { bytes, source: dst });
    }

    fn app_exchange_udp(dst: Address, dg: UdpDatagram, local: Address, tx: Sender<Datagram>) {
        let Ok(sock) = UdpSocket::bind("[::]:0") else { return };
        let _ = sock.set_read_timeout(Some(APP_TIMEOUT));
        if sock.send_to(&dg.payload, sockaddr(dst, dg.dst_port)).is_err() {
            return;
        }
        let mut buf = vec![0u8; 65_535];
        if let Ok((n, _)) = sock.recv_from(&mut buf) {
            let reply = Packet::udp(
                dst,
                local,
                64,
                UdpDatagram {
                    src_port: dg.dst_port,
                    dst_port: dg.src_port,
                    payload: buf[..n].to_vec(),
                },
            );
            let _ = tx.send(Datagram {
                bytes: reply.encode(),
                source: dst,
            });
        }
    }

    impl LinkIo for RawSocketLink {
        fn start(&mut self, inbox: Sender<Datagram>) -> std::io::Result<()> {
            self.spawn_reader(&self.icmp, wire::NH_ICMPV6, inbox.clone())?;
            self.spawn_reader(&self.tcp, wire::NH_TCP, inbox.clone())?;
            self.inbox = Some(inbox);
            Ok(())
        }

        fn transmit(&mut self, packet: &[u8], destination: Address) -> std::io::Result<()> {
            let p = Packet::decode(packet).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
            let tx = self.inbox.clone().expect("link started");
            let to = SockAddr::from(sockaddr(destination, 0));
            match p.body {
                Body::Icmp(_) => {
                    self.icmp.set_unicast_hops_v6(u32::from(p.hop_limit))?;
                    self.icmp.send_to(&p.encode_upper(), &to)?;
                }
                Body::Tcp(seg) if seg.has(tcp_flags::SYN) => {
                    self.tcp.set_unicast_hops_v6(u32::from(p.hop_limit))?;
                    self.tcp
                        .send_to(&Packet::tcp(p.src, p.dst, p.hop_limit, seg).encode_upper(), &to)?;
                }
                Body::Tcp(seg) => {
                    let local = self.local;
                    thread::spawn(move || app_exchange_tcp(destination, seg, local, tx));
                }
                Body::Udp(dg) => {
                    let local = self.local;
                    thread::spawn(move || app_exchange_udp(destination, dg, local, tx));
                }
            }
            Ok(())
        }
    }

    /// Factory for the `live` registry entry. Requires option `source=<ipv6>`.
    pub fn open_live_backend(config: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
        let source: Address = config
            .get("source")
            .ok_or_else(|| BackendError::Config("live backend needs source=<ipv6 address>".into()))?
            .parse()
            .map_err(|e| BackendError::Config(format!("{e}")))?;
        let link = RawSocketLink::new(source)?;
        Ok(Box::new(LiveBackend::open(link, source)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ProbeSpec, RateLimit, Scanner};

    #[test]
    fn reflector_answers_on_wall_clock() {
        let link = ReflectorLink::new();
        let log = link.send_log();
        let mut backend = LiveBackend::open(link, "2001:db8::1".parse().unwrap()).unwrap();
        let mut s = Scanner::new(&mut backend, RateLimit::new(200).unwrap(), 1);
        let spec = ProbeSpec::echo(64, s.payload_tag()).unwrap();
        let targets: Vec<Address> = (1..=20u128).map(|i| Address(0x2001_0db8_0001 << 80 | i)).collect();
        let (out, summary) = s
            .collect(targets.into_iter().map(|t| crate::engine::Probe {
                target: t,
                spec: spec.clone(),
            }))
            .unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(summary.matched, 20);
        let sends = log.lock().unwrap();
        for pair in sends.windows(2) {
            assert!(pair[1] - pair[0] >= Duration::from_millis(5));
        }
    }
}
