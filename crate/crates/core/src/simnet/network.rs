use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backend::SimBackend;
use super::responders::ServiceTable;
use super::{loop_cycle, HostSpec, LinkSpec, PeripherySpec, RouterBehavior, RouterSpec, SimError, TopologySpec};
use crate::engine::Transport;
use crate::prefix::{Address, Prefix};
use crate::wire::{self, tcp_flags, Body, Packet, TcpSegment, UdpDatagram};

const REPLY_HOP_LIMIT: u8 = 64;
const PORT_UNREACHABLE: u8 = 4;

/// Diagnostics counted while delivering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub delivered: u64,
    pub responses: u64,
    pub dropped: u64,
    pub malformed: u64,
}

struct Host {
    distance: u8,
    echo: bool,
    services: ServiceTable,
}

struct Router {
    address: Address,
    prefix: Prefix,
    distance: u8,
    kind: RouterKind,
}

enum RouterKind {
    Forward,
    Unreachable(u8),
    Loop(Vec<Address>),
}

enum Terminal<'a> {
    Host(&'a Host),
    /// A synthetic periphery router answering echo to its own address.
    Cpe {
        distance: u8,
    },
    Unreachable {
        reporter: Address,
        code: u8,
        distance: u8,
    },
    Loop {
        cycle: Vec<Address>,
        distance: u8,
    },
    /// Forwarded up to `last_hop`, then discarded.
    Drop {
        last_hop: u8,
    },
}

impl Terminal<'_> {
    fn distance(&self) -> u8 {
        match self {
            Terminal::Host(h) => h.distance,
            Terminal::Cpe { distance } | Terminal::Unreachable { distance, .. } | Terminal::Loop { distance, .. } => *distance,
            Terminal::Drop { last_hop } => last_hop.saturating_add(1),
        }
    }
}

/// A built topology. Shared between backends through [`SimHandle`].
pub struct SimNetwork {
    seed: u64,
    prober: Address,
    transit: Prefix,
    link: LinkSpec,
    hosts: HashMap<Address, Host>,
    routers: Vec<Router>,
    periphery: Vec<PeripherySpec>,
    rng: ChaCha8Rng,
    stats: SimStats,
    isn: u32,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Validates `spec` and builds a network. Link randomness (latency jitter and
/// loss) is seeded from `spec.seed`; use [`SimHandle::reseed_link`] to vary it.
pub fn build_topology(spec: &TopologySpec) -> Result<SimHandle, SimError> {
    spec.validate()?;
    let by_id: HashMap<&str, &RouterSpec> = spec.routers.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut routers = Vec::with_capacity(spec.routers.len());
    for r in &spec.routers {
        let kind = match &r.behavior {
            RouterBehavior::Forward => RouterKind::Forward,
            RouterBehavior::UnreachableReply { code } => RouterKind::Unreachable(*code),
            RouterBehavior::LoopWith { .. } => RouterKind::Loop(loop_cycle(&by_id, r)?.into_iter().map(|m| m.address).collect()),
        };
        routers.push(Router {
            address: r.address,
            prefix: r.prefix.clone(),
            distance: r.distance,
            kind,
        });
    }
    // Longest prefix first, then nearest.
    routers.sort_by(|a, b| b.prefix.len().cmp(&a.prefix.len()).then(a.distance.cmp(&b.distance)));

    let hosts = spec
        .hosts
        .iter()
        .map(|h: &HostSpec| {
            (
                h.address,
                Host {
                    distance: h.distance,
                    echo: h.echo,
                    services: ServiceTable::new(&h.services, h.llm.as_ref()),
                },
            )
        })
        .collect();

    Ok(SimHandle(Arc::new(Mutex::new(SimNetwork {
        seed: spec.seed,
        prober: spec.prober,
        transit: spec.transit.clone(),
        link: spec.link.clone(),
        hosts,
        routers,
        periphery: spec.periphery.clone(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        stats: SimStats::default(),
        isn: 0,
    }))))
}

impl SimNetwork {
    pub fn prober(&self) -> Address {
        self.prober
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    fn transit_hop(&self, hop: u8) -> Address {
        Address(self.transit.bits() | u128::from(hop))
    }

    /// The address that reports expiry at `hop` on the way to `dst`.
    fn path_reporter(&self, dst: Address, hop: u8) -> Address {
        self.routers
            .iter()
            .find(|r| r.distance == hop && r.prefix.contains(dst))
            .map_or_else(|| self.transit_hop(hop), |r| r.address)
    }

    fn delegation_key(&self, block: usize, delegation: &Prefix) -> u64 {
        let bits = delegation.bits();
        mix(self.seed ^ mix((bits >> 64) as u64 ^ mix(bits as u64 ^ block as u64)))
    }

    /// The synthetic router for the delegation containing `addr`, if populated.
    pub fn periphery_device(&self, addr: Address) -> Option<Address> {
        let (i, block) = self.periphery.iter().enumerate().find(|(_, b)| b.prefix.contains(addr))?;
        let delegation = Prefix::new(addr, block.delegated_len);
        let key = self.delegation_key(i, &delegation);
        (unit(key) < block.density).then(|| cpe_address(&delegation, key))
    }

    fn periphery_terminal(&self, dst: Address) -> Option<Terminal<'_>> {
        let (i, block) = self.periphery.iter().enumerate().find(|(_, b)| b.prefix.contains(dst))?;
        let delegation = Prefix::new(dst, block.delegated_len);
        let key = self.delegation_key(i, &delegation);
        if unit(key) >= block.density {
            return Some(Terminal::Drop {
                last_hop: block.distance - 1,
            });
        }
        let cpe = cpe_address(&delegation, key);
        Some(if cpe == dst {
            Terminal::Cpe {
                distance: block.distance,
            }
        } else if unit(mix(key)) < block.looping {
            Terminal::Loop {
                cycle: vec![cpe, self.transit_hop(block.distance - 1)],
                distance: block.distance,
            }
        } else {
            Terminal::Unreachable {
                reporter: cpe,
                code: block.unreachable_code,
                distance: block.distance,
            }
        })
    }

    fn terminal(&self, dst: Address) -> Terminal<'_> {
        let mut covering: Vec<&Router> = self.routers.iter().filter(|r| r.prefix.contains(dst)).collect();
        covering.sort_by_key(|r| r.distance);
        let as_terminal = |r: &Router| match &r.kind {
            RouterKind::Loop(cycle) => {
                let entry = cycle.iter().position(|a| *a == r.address).unwrap_or(0);
                let mut cycle = cycle.clone();
                cycle.rotate_left(entry);
                Some(Terminal::Loop {
                    cycle,
                    distance: r.distance,
                })
            }
            RouterKind::Unreachable(code) => Some(Terminal::Unreachable {
                reporter: r.address,
                code: *code,
                distance: r.distance,
            }),
            RouterKind::Forward => None,
        };
        if let Some(host) = self.hosts.get(&dst) {
            let looped = covering
                .iter()
                .filter(|r| r.distance < host.distance && matches!(r.kind, RouterKind::Loop(_)))
                .find_map(|r| as_terminal(r));
            return looped.unwrap_or(Terminal::Host(host));
        }
        if let Some(t) = covering.iter().find_map(|r| as_terminal(r)) {
            return t;
        }
        if let Some(t) = self.periphery_terminal(dst) {
            return t;
        }
        Terminal::Drop {
            last_hop: covering.last().map_or(0, |r| r.distance),
        }
    }

    /// True if `addr` is an end host or a synthetic periphery router.
    pub fn is_assigned(&self, addr: Address) -> bool {
        self.hosts.contains_key(&addr) || self.periphery_device(addr) == Some(addr)
    }

    fn latency(&mut self) -> Duration {
        let jitter = if self.link.jitter_ms > 0.0 {
            self.rng.gen::<f64>() * self.link.jitter_ms
        } else {
            0.0
        };
        Duration::from_nanos(((self.link.latency_ms + jitter) * 1e6).round() as u64)
    }

    fn lost(&mut self) -> bool {
        self.link.drop > 0.0 && self.rng.gen::<f64>() < self.link.drop
    }

    /// Injects one packet at virtual time `now` and returns the responses with
    /// their arrival times.
    pub fn deliver(&mut self, bytes: &[u8], now: Duration) -> Vec<(Vec<u8>, Duration)> {
        let packet = match Packet::decode(bytes) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("simnet: dropping malformed packet: {e}");
                self.stats.malformed += 1;
                return Vec::new();
            }
        };
        self.stats.delivered += 1;
        let replies = self.respond(&packet, bytes);
        let mut out = Vec::with_capacity(replies.len());
        for reply in replies {
            if self.lost() {
                self.stats.dropped += 1;
                continue;
            }
            let at = now + self.latency();
            self.stats.responses += 1;
            out.push((reply.encode(), at));
        }
        out
    }

    fn respond(&mut self, packet: &Packet, raw: &[u8]) -> Vec<Packet> {
        let dst = packet.dst;
        let h = packet.hop_limit;
        let expired = |net: &SimNetwork, hop: u8| {
            let mut quoted = raw.to_vec();
            quoted[7] = 1;
            Packet::icmp_error(net.path_reporter(dst, hop), packet.src, wire::ICMP_TIME_EXCEEDED, 0, &quoted)
        };
        let terminal = self.terminal(dst);
        let t = terminal.distance();
        match terminal {
            Terminal::Drop { last_hop } => {
                if h <= last_hop {
                    vec![expired(self, h)]
                } else {
                    Vec::new()
                }
            }
            _ if h < t => vec![expired(self, h)],
            Terminal::Loop { cycle, distance } => {
                let reporter = cycle[usize::from(h - distance) % cycle.len()];
                let mut quoted = raw.to_vec();
                quoted[7] = 1;
                vec![Packet::icmp_error(reporter, packet.src, wire::ICMP_TIME_EXCEEDED, 0, &quoted)]
            }
            Terminal::Unreachable {
                reporter,
                code,
                distance,
            } => {
                let mut quoted = raw.to_vec();
                quoted[7] = h - distance + 1;
                vec![Packet::icmp_error(
                    reporter,
                    packet.src,
                    wire::ICMP_DEST_UNREACHABLE,
                    code,
                    &quoted,
                )]
            }
            Terminal::Cpe { distance } => match &packet.body {
                Body::Icmp(m) if m.icmp_type == wire::ICMP_ECHO_REQUEST => vec![echo_reply(packet, distance)],
                _ => Vec::new(),
            },
            Terminal::Host(host) => {
                let distance = host.distance;
                let echo = host.echo;
                let reply = match &packet.body {
                    Body::Icmp(m) if m.icmp_type == wire::ICMP_ECHO_REQUEST => echo.then(|| echo_reply(packet, distance)),
                    Body::Icmp(_) => None,
                    Body::Tcp(seg) => {
                        let answer = host_tcp(host, seg);
                        answer.map(|seg| Packet::tcp(dst, packet.src, reply_hops(distance), seg))
                    }
                    Body::Udp(dg) => match host.services.get(dg.dst_port, Transport::Udp) {
                        Some(service) => service.respond(&dg.payload).map(|payload| {
                            Packet::udp(
                                dst,
                                packet.src,
                                reply_hops(distance),
                                UdpDatagram {
                                    src_port: dg.dst_port,
                                    dst_port: dg.src_port,
                                    payload,
                                },
                            )
                        }),
                        None => Some(Packet::icmp_error(
                            dst,
                            packet.src,
                            wire::ICMP_DEST_UNREACHABLE,
                            PORT_UNREACHABLE,
                            raw,
                        )),
                    },
                };
                let mut reply: Vec<Packet> = reply.into_iter().collect();
                if let Some(Packet {
                    body: Body::Tcp(seg), ..
                }) = reply.first_mut()
                {
                    if seg.has(tcp_flags::SYN) {
                        self.isn = self.isn.wrapping_add(0x0001_0003);
                        seg.seq = mix(self.seed ^ u64::from(self.isn)) as u32;
                    }
                }
                reply
            }
        }
    }
}

fn reply_hops(distance: u8) -> u8 {
    REPLY_HOP_LIMIT.saturating_sub(distance - 1)
}

fn echo_reply(packet: &Packet, distance: u8) -> Packet {
    let Body::Icmp(m) = &packet.body else { unreachable!() };
    Packet {
        src: packet.dst,
        dst: packet.src,
        hop_limit: reply_hops(distance),
        body: Body::Icmp(wire::IcmpMessage {
            icmp_type: wire::ICMP_ECHO_REPLY,
            code: 0,
            rest: m.rest,
            data: m.data.clone(),
        }),
    }
}

fn host_tcp(host: &Host, seg: &TcpSegment) -> Option<TcpSegment> {
    let service = host.services.get(seg.dst_port, Transport::Tcp);
    let reply = |flags, ack, payload| TcpSegment {
        src_port: seg.dst_port,
        dst_port: seg.src_port,
        seq: 0,
        ack,
        flags,
        payload,
    };
    if seg.has(tcp_flags::RST) {
        return None;
    }
    if seg.has(tcp_flags::SYN) {
        let ack = seg.seq.wrapping_add(1);
        return Some(match service {
            Some(_) => reply(tcp_flags::SYN | tcp_flags::ACK, ack, Vec::new()),
            None => reply(tcp_flags::RST | tcp_flags::ACK, ack, Vec::new()),
        });
    }
    let ack = seg.seq.wrapping_add(seg.payload.len() as u32);
    match service {
        None => Some(reply(tcp_flags::RST | tcp_flags::ACK, ack, Vec::new())),
        Some(service) => service
            .respond(&seg.payload)
            .map(|payload| reply(tcp_flags::PSH | tcp_flags::ACK, ack, payload)),
    }
}

/// First /64 of the delegation with an interface identifier drawn from `key`.
fn cpe_address(delegation: &Prefix, key: u64) -> Address {
    let net = delegation.bits() & !((1u128 << 64) - 1);
    let mut iid = mix(key ^ 0x6370_6500) | 1;
    if iid == crate::loops::UNASSIGNED_IID {
        iid ^= 2;
    }
    Address(net | u128::from(iid))
}

/// Cloneable, thread-safe handle to a [`SimNetwork`].
#[derive(Clone)]
pub struct SimHandle(Arc<Mutex<SimNetwork>>);

impl SimHandle {
    pub fn lock(&self) -> MutexGuard<'_, SimNetwork> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A backend with its own virtual clock starting at zero.
    pub fn backend(&self) -> SimBackend {
        SimBackend::new(self.clone())
    }

    pub fn deliver(&self, bytes: &[u8], now: Duration) -> Vec<(Vec<u8>, Duration)> {
        self.lock().deliver(bytes, now)
    }

    /// Restarts link randomness from `seed`.
    pub fn reseed_link(&self, seed: u64) {
        self.lock().rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn stats(&self) -> SimStats {
        self.lock().stats()
    }

    pub fn prober(&self) -> Address {
        self.lock().prober()
    }

    pub fn is_assigned(&self, addr: Address) -> bool {
        self.lock().is_assigned(addr)
    }

    pub fn periphery_device(&self, addr: Address) -> Option<Address> {
        self.lock().periphery_device(addr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::{HostSpec, PeripherySpec, Responder, RouterBehavior, RouterSpec, ServiceSpec};

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn p(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn probe(dst: Address, hop_limit: u8) -> Vec<u8> {
        Packet::echo_request(a("2001:db8:feed::1"), dst, hop_limit, 7, 1, vec![1, 2, 3, 4, 5, 6]).encode()
    }

    fn one(net: &SimHandle, bytes: &[u8]) -> Option<Packet> {
        let out = net.deliver(bytes, Duration::ZERO);
        assert!(out.len() <= 1);
        out.first().map(|(b, _)| Packet::decode(b).unwrap())
    }

    fn icmp(p: &Packet) -> (u8, u8) {
        match &p.body {
            Body::Icmp(m) => (m.icmp_type, m.code),
            other => panic!("not icmp: {other:?}"),
        }
    }

    fn loop_pair(distance: u8) -> TopologySpec {
        TopologySpec {
            routers: vec![
                RouterSpec {
                    id: "r1".into(),
                    address: a("2001:db8:1::1"),
                    prefix: p("2001:db8:1::/48"),
                    distance,
                    behavior: RouterBehavior::LoopWith { peer: "r2".into() },
                },
                RouterSpec {
                    id: "r2".into(),
                    address: a("2001:db8:ff::2"),
                    prefix: p("2001:db8:1::/48"),
                    distance: distance + 1,
                    behavior: RouterBehavior::LoopWith { peer: "r1".into() },
                },
                RouterSpec {
                    id: "pre".into(),
                    address: a("2001:db8:ff::9"),
                    prefix: p("2001:db8::/32"),
                    distance: distance - 1,
                    behavior: RouterBehavior::Forward,
                },
            ],
            ..TopologySpec::default()
        }
    }

    #[test]
    fn empty_network_answers_nothing() {
        let net = build_topology(&TopologySpec::default()).unwrap();
        for h in [1, 2, 32, 255] {
            assert!(one(&net, &probe(a("2001:db8::1"), h)).is_none());
        }
    }

    #[test]
    fn loop_hop_trace() {
        let net = build_topology(&loop_pair(3)).unwrap();
        let dst = a("2001:db8:1::99");
        let before = one(&net, &probe(dst, 2)).unwrap();
        assert_eq!(icmp(&before), (3, 0));
        assert_eq!(before.src, a("2001:db8:ff::9"));
        let members = [a("2001:db8:1::1"), a("2001:db8:ff::2")];
        for h in 3..=40u8 {
            let te = one(&net, &probe(dst, h)).unwrap();
            assert_eq!(icmp(&te), (3, 0));
            assert_eq!(te.src, members[usize::from(h - 3) % 2], "hop limit {h}");
        }
    }

    #[test]
    fn time_exceeded_quotes_the_probe() {
        let net = build_topology(&loop_pair(3)).unwrap();
        let sent = probe(a("2001:db8:1::99"), 32);
        let te = one(&net, &sent).unwrap();
        let Body::Icmp(m) = te.body else { panic!() };
        let q = wire::Quoted::parse(&m.data).unwrap();
        assert_eq!(q.header.dst, a("2001:db8:1::99"));
        assert_eq!(q.echo().unwrap().2, &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn unreachable_router_and_host_behind_it() {
        let spec = TopologySpec {
            hosts: vec![HostSpec::new(a("2001:db8:2::10"), 6)],
            routers: vec![RouterSpec {
                id: "edge".into(),
                address: a("2001:db8:2::1"),
                prefix: p("2001:db8:2::/48"),
                distance: 5,
                behavior: RouterBehavior::UnreachableReply { code: 0 },
            }],
            ..TopologySpec::default()
        };
        let net = build_topology(&spec).unwrap();
        let unr = one(&net, &probe(a("2001:db8:2::77"), 32)).unwrap();
        assert_eq!(icmp(&unr), (1, 0));
        assert_eq!(unr.src, a("2001:db8:2::1"));
        let reply = one(&net, &probe(a("2001:db8:2::10"), 32)).unwrap();
        assert_eq!(icmp(&reply), (129, 0));
        let te = one(&net, &probe(a("2001:db8:2::10"), 5)).unwrap();
        assert_eq!((icmp(&te), te.src), ((3, 0), a("2001:db8:2::1")));
    }

    #[test]
    fn tcp_and_udp_services() {
        let host = a("2001:db8:3::1");
        let spec = TopologySpec {
            hosts: vec![HostSpec::new(host, 4)
                .service(ServiceSpec::tcp(
                    21,
                    Responder::Banner {
                        text: "220 vsFTPd 3.0.3\r\n".into(),
                    },
                ))
                .service(ServiceSpec::udp(7, Responder::Echo))],
            ..TopologySpec::default()
        };
        let net = build_topology(&spec).unwrap();
        let src = a("2001:db8:feed::1");
        let syn = |port| {
            Packet::tcp(
                src,
                host,
                64,
                TcpSegment {
                    src_port: 4000,
                    dst_port: port,
                    seq: 100,
                    ack: 0,
                    flags: tcp_flags::SYN,
                    payload: vec![],
                },
            )
            .encode()
        };
        let Body::Tcp(sa) = one(&net, &syn(21)).unwrap().body else {
            panic!()
        };
        assert_eq!((sa.flags, sa.ack), (tcp_flags::SYN | tcp_flags::ACK, 101));
        let Body::Tcp(rst) = one(&net, &syn(22)).unwrap().body else {
            panic!()
        };
        assert!(rst.has(tcp_flags::RST));

        let data = Packet::tcp(
            src,
            host,
            64,
            TcpSegment {
                src_port: 4000,
                dst_port: 21,
                seq: 100,
                ack: 0,
                flags: tcp_flags::PSH | tcp_flags::ACK,
                payload: vec![],
            },
        )
        .encode();
        let Body::Tcp(banner) = one(&net, &data).unwrap().body else {
            panic!()
        };
        assert_eq!(banner.payload, b"220 vsFTPd 3.0.3\r\n");

        let udp = |port| {
            Packet::udp(
                src,
                host,
                64,
                UdpDatagram {
                    src_port: 5000,
                    dst_port: port,
                    payload: b"ping".to_vec(),
                },
            )
            .encode()
        };
        let Body::Udp(back) = one(&net, &udp(7)).unwrap().body else {
            panic!()
        };
        assert_eq!(back.payload, b"ping");
        assert_eq!(icmp(&one(&net, &udp(9)).unwrap()), (1, PORT_UNREACHABLE));
    }

    #[test]
    fn periphery_population_matches_density() {
        let mut block = PeripherySpec::new(p("2001:db8:100::/40"), 56, 0.25);
        block.distance = 7;
        let spec = TopologySpec {
            seed: 3,
            periphery: vec![block],
            ..TopologySpec::default()
        };
        let net = build_topology(&spec).unwrap();
        let mut populated = 0;
        for i in 0..4096u128 {
            let dst = Address(p("2001:db8:100::/40").bits() | (i << 72) | 0x1234);
            match one(&net, &probe(dst, 64)) {
                Some(r) => {
                    assert_eq!(icmp(&r), (1, 3));
                    assert_eq!(Some(r.src), net.periphery_device(dst));
                    assert!(Prefix::new(dst, 56).contains(r.src));
                    assert!(net.is_assigned(r.src));
                    assert_eq!(icmp(&one(&net, &probe(r.src, 64)).unwrap()), (129, 0));
                    populated += 1;
                }
                None => assert!(net.periphery_device(dst).is_none()),
            }
        }
        assert!((900..1150).contains(&populated), "{populated}");
    }

    #[test]
    fn same_seed_same_timings() {
        let mut spec = loop_pair(4);
        spec.link.jitter_ms = 10.0;
        spec.link.drop = 0.2;
        let run = || {
            let net = build_topology(&spec).unwrap();
            (0..50u8)
                .flat_map(|h| net.deliver(&probe(a("2001:db8:1::5"), h + 1), Duration::from_millis(u64::from(h))))
                .collect::<Vec<_>>()
        };
        let first = run();
        assert_eq!(first, run());
        assert!(first.len() < 50);
    }

    #[test]
    fn malformed_packets_are_counted() {
        let net = build_topology(&TopologySpec::default()).unwrap();
        assert!(net.deliver(&[0x45, 0, 0], Duration::ZERO).is_empty());
        assert_eq!(net.stats().malformed, 1);
    }
}
