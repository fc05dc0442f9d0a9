//! Deterministic simulated IPv6 network.
//!
//! A topology is a set of end hosts (with scripted services), routers with a
//! hop distance from the prober and a forwarding behavior, and synthetic
//! periphery blocks that stand in for large populations of customer-premises
//! routers without enumerating them. Time is virtual: every backend opened on
//! a network carries its own [`VirtualClock`] that only moves when the engine
//! waits.
//!
//! # Topology file
//!
//! ```toml
//! seed = 7
//!
//! [link]
//! latency_ms = 20.0
//! jitter_ms = 4.0
//! drop = 0.0
//!
//! [[hosts]]
//! address = "2001:db8:1::1"
//! distance = 6
//! services = [
//!   { port = 21, responder = { kind = "banner", text = "220 vsFTPd 3.0.3\r\n" } },
//!   { port = 53, transport = "udp", responder = { kind = "dns", recursive = true, version = "dnsmasq-2.73" } },
//! ]
//! llm = { tool = "Ollama", models = ["llama3:latest"] }
//!
//! [[routers]]
//! id = "cpe"
//! address = "2001:db8:2::1"
//! prefix = "2001:db8:2::/48"
//! distance = 9
//! behavior = { kind = "loop_with", peer = "isp" }
//!
//! [[routers]]
//! id = "isp"
//! address = "2001:db8:ff::1"
//! prefix = "2001:db8:2::/48"
//! distance = 8
//! behavior = { kind = "loop_with", peer = "cpe" }
//!
//! [[periphery]]
//! prefix = "2001:db8:100::/40"
//! delegated_len = 56
//! density = 0.25
//! distance = 10
//! ```
//!
//! Hop semantics: a probe sent with hop limit `H` toward a destination whose
//! terminal element sits at distance `t` expires at hop `H` when `H < t`, and
//! the reporter is the configured router at that distance or a transit
//! address. A loop entered at distance `d` reports Time Exceeded for every
//! `H >= d` from cycle member `(H - d) mod len`. Destinations covered by
//! nothing are dropped silently.

mod backend;
mod network;
mod responders;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Transport;
use crate::hlev::Tool;
use crate::prefix::{Address, Prefix};

pub use backend::{open_sim_backend, SimBackend, VirtualClock};
pub use network::{build_topology, SimHandle, SimNetwork, SimStats};
pub use responders::tool_routes;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("topology parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("topology i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate host address {0}")]
    DuplicateHost(Address),
    #[error("duplicate router id {0:?}")]
    DuplicateRouter(String),
    #[error("router {router:?} loops with unknown peer {peer:?}")]
    UnknownPeer { router: String, peer: String },
    #[error("loop starting at router {0:?} does not close through loop_with routers")]
    OpenLoop(String),
    #[error("{0} has distance 0; distances start at 1")]
    ZeroDistance(String),
    #[error("periphery block {prefix}: {reason}")]
    Periphery { prefix: Prefix, reason: String },
    #[error("link {0} must be within [0, 1]")]
    Probability(&'static str),
    #[error("link latency and jitter must be finite and non-negative")]
    Latency,
    #[error("host {host} lies inside unassigned prefix {prefix}")]
    HostInUnassigned { host: Address, prefix: Prefix },
}

fn default_seed() -> u64 {
    0
}

fn default_prober() -> Address {
    "2001:db8:feed::1".parse().unwrap()
}

fn default_transit() -> Prefix {
    "2001:db8:ffff::/48".parse().unwrap()
}

fn default_true() -> bool {
    true
}

fn default_host_distance() -> u8 {
    8
}

fn default_latency() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Base round-trip time in milliseconds.
    #[serde(default = "default_latency")]
    pub latency_ms: f64,
    /// Uniform extra delay in `[0, jitter_ms)`.
    #[serde(default)]
    pub jitter_ms: f64,
    /// Probability that a response is lost.
    #[serde(default)]
    pub drop: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            latency_ms: default_latency(),
            jitter_ms: 0.0,
            drop: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpRoute {
    pub path: String,
    #[serde(default = "HttpRoute::default_status")]
    pub status: u16,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: String,
}

impl HttpRoute {
    fn default_status() -> u16 {
        200
    }

    pub fn new(path: &str, status: u16, body: &str) -> HttpRoute {
        HttpRoute {
            path: path.to_string(),
            status,
            headers: BTreeMap::new(),
            body: body.to_string(),
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> HttpRoute {
        self.headers.insert(name.to_string(), value.to_string());
        self
    }
}

fn default_stratum() -> u8 {
    2
}

fn default_tls_version() -> u16 {
    0x0303
}

/// How a service answers one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Responder {
    /// Sends fixed bytes whatever the request (FTP, SSH and Telnet speak first).
    Banner { text: String },
    Http {
        #[serde(default)]
        routes: Vec<HttpRoute>,
        /// Headers added to every response, e.g. `Server`.
        #[serde(default)]
        headers: BTreeMap<String, String>,
        /// Served for unknown paths; a plain 404 otherwise.
        #[serde(default)]
        fallback: Option<HttpRoute>,
    },
    Dns {
        #[serde(default)]
        recursive: bool,
        #[serde(default)]
        version: Option<String>,
    },
    Ntp {
        #[serde(default = "default_stratum")]
        stratum: u8,
    },
    Tls {
        #[serde(default = "default_tls_version")]
        version: u16,
    },
    /// Returns the request bytes unchanged.
    Echo,
    /// Accepts connections and never answers.
    Silent,
}

fn default_transport() -> Transport {
    Transport::Tcp
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub port: u16,
    #[serde(default = "default_transport")]
    pub transport: Transport,
    pub responder: Responder,
}

impl ServiceSpec {
    pub fn tcp(port: u16, responder: Responder) -> ServiceSpec {
        ServiceSpec {
            port,
            transport: Transport::Tcp,
            responder,
        }
    }

    pub fn udp(port: u16, responder: Responder) -> ServiceSpec {
        ServiceSpec {
            port,
            transport: Transport::Udp,
            responder,
        }
    }
}

/// What an emulated LLM tool does when its model-listing endpoint is queried.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmBehavior {
    #[default]
    Open,
    AuthRequired,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSpec {
    pub tool: Tool,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default)]
    pub confirm: ConfirmBehavior,
    /// Overrides the tool's default port.
    #[serde(default)]
    pub port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub address: Address,
    #[serde(default = "default_host_distance")]
    pub distance: u8,
    /// Answers echo requests.
    #[serde(default = "default_true")]
    pub echo: bool,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub llm: Option<LlmSpec>,
}

impl HostSpec {
    pub fn new(address: Address, distance: u8) -> HostSpec {
        HostSpec {
            address,
            distance,
            echo: true,
            services: Vec::new(),
            llm: None,
        }
    }

    pub fn service(mut self, service: ServiceSpec) -> HostSpec {
        self.services.push(service);
        self
    }

    pub fn llm(mut self, llm: LlmSpec) -> HostSpec {
        self.llm = Some(llm);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterBehavior {
    /// Passes traffic on; destinations without a host are dropped.
    Forward,
    /// Sends traffic for its prefix to `peer`, which sends it onward around the cycle.
    LoopWith { peer: String },
    /// Answers traffic for unassigned addresses with Destination Unreachable.
    UnreachableReply { code: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub id: String,
    pub address: Address,
    pub prefix: Prefix,
    pub distance: u8,
    pub behavior: RouterBehavior,
}

fn default_delegated_len() -> u8 {
    56
}

fn default_density() -> f64 {
    1.0
}

fn default_periphery_distance() -> u8 {
    10
}

fn default_unreachable_code() -> u8 {
    3
}

/// A block of synthetic customer-premises routers, one per populated
/// delegation of `delegated_len`. Each answers for its delegation with
/// Destination Unreachable, or loops with its upstream for a `looping`
/// fraction of delegations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeripherySpec {
    pub prefix: Prefix,
    #[serde(default = "default_delegated_len")]
    pub delegated_len: u8,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_periphery_distance")]
    pub distance: u8,
    #[serde(default = "default_unreachable_code")]
    pub unreachable_code: u8,
    #[serde(default)]
    pub looping: f64,
}

impl PeripherySpec {
    pub fn new(prefix: Prefix, delegated_len: u8, density: f64) -> PeripherySpec {
        PeripherySpec {
            prefix,
            delegated_len,
            density,
            distance: default_periphery_distance(),
            unreachable_code: default_unreachable_code(),
            looping: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Source address of the prober.
    #[serde(default = "default_prober")]
    pub prober: Address,
    /// Addresses for intermediate routers that are not configured explicitly.
    #[serde(default = "default_transit")]
    pub transit: Prefix,
    #[serde(default)]
    pub link: LinkSpec,
    #[serde(default)]
    pub hosts: Vec<HostSpec>,
    #[serde(default)]
    pub routers: Vec<RouterSpec>,
    #[serde(default)]
    pub periphery: Vec<PeripherySpec>,
    /// Prefixes known to contain no host; checked at construction.
    #[serde(default)]
    pub unassigned: Vec<Prefix>,
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec {
            seed: 0,
            prober: default_prober(),
            transit: default_transit(),
            link: LinkSpec::default(),
            hosts: Vec::new(),
            routers: Vec::new(),
            periphery: Vec::new(),
            unassigned: Vec::new(),
        }
    }
}

impl TopologySpec {
    pub fn from_toml(text: &str) -> Result<TopologySpec, SimError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<TopologySpec, SimError> {
        TopologySpec::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let link = &self.link;
        if !(0.0..=1.0).contains(&link.drop) {
            return Err(SimError::Probability("drop"));
        }
        if !link.latency_ms.is_finite() || !link.jitter_ms.is_finite() || link.latency_ms < 0.0 || link.jitter_ms < 0.0 {
            return Err(SimError::Latency);
        }

        let mut seen = HashSet::new();
        for h in &self.hosts {
            if !seen.insert(h.address) {
                return Err(SimError::DuplicateHost(h.address));
            }
            if h.distance == 0 {
                return Err(SimError::ZeroDistance(format!("host {}", h.address)));
            }
            if let Some(p) = self.unassigned.iter().find(|p| p.contains(h.address)) {
                return Err(SimError::HostInUnassigned {
                    host: h.address,
                    prefix: p.clone(),
                });
            }
        }

        let mut by_id: HashMap<&str, &RouterSpec> = HashMap::new();
        for r in &self.routers {
            if by_id.insert(&r.id, r).is_some() {
                return Err(SimError::DuplicateRouter(r.id.clone()));
            }
            if r.distance == 0 {
                return Err(SimError::ZeroDistance(format!("router {:?}", r.id)));
            }
        }
        for r in &self.routers {
            if let RouterBehavior::LoopWith { peer } = &r.behavior {
                loop_cycle(&by_id, r)?;
                if !by_id.contains_key(peer.as_str()) {
                    return Err(SimError::UnknownPeer {
                        router: r.id.clone(),
                        peer: peer.clone(),
                    });
                }
            }
        }

        for p in &self.periphery {
            let bad = |reason: &str| SimError::Periphery {
                prefix: p.prefix.clone(),
                reason: reason.to_string(),
            };
            if p.delegated_len < p.prefix.len() || p.delegated_len > 64 {
                return Err(bad("delegated_len must be between the block length and 64"));
            }
            if !(0.0..=1.0).contains(&p.density) || !(0.0..=1.0).contains(&p.looping) {
                return Err(bad("density and looping must be within [0, 1]"));
            }
            if p.distance < 2 {
                return Err(bad("distance must be at least 2"));
            }
        }
        Ok(())
    }
}

/// Router ids around the cycle that starts at `start`.
fn loop_cycle<'a>(by_id: &HashMap<&str, &'a RouterSpec>, start: &'a RouterSpec) -> Result<Vec<&'a RouterSpec>, SimError> {
    let mut cycle = vec![start];
    let mut current = start;
    loop {
        let RouterBehavior::LoopWith { peer } = &current.behavior else {
            return Err(SimError::OpenLoop(start.id.clone()));
        };
        let next = *by_id.get(peer.as_str()).ok_or_else(|| SimError::UnknownPeer {
            router: current.id.clone(),
            peer: peer.clone(),
        })?;
        if next.id == start.id {
            return Ok(cycle);
        }
        if cycle.iter().any(|r| r.id == next.id) || cycle.len() > by_id.len() {
            return Err(SimError::OpenLoop(start.id.clone()));
        }
        cycle.push(next);
        current = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn p(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn router(id: &str, peer: &str) -> RouterSpec {
        RouterSpec {
            id: id.into(),
            address: a("2001:db8::1"),
            prefix: p("2001:db8::/48"),
            distance: 3,
            behavior: RouterBehavior::LoopWith { peer: peer.into() },
        }
    }

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("mod.rs");
        let start = doc.find("//! ```toml").unwrap();
        let body: String = doc[start..]
            .lines()
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").strip_prefix(' ').unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n");
        let spec = TopologySpec::from_toml(&body).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.hosts[0].services.len(), 2);
        assert_eq!(spec.routers.len(), 2);
        assert_eq!(spec.periphery[0].delegated_len, 56);
    }

    #[test]
    fn rejects_duplicate_hosts() {
        let spec = TopologySpec {
            hosts: vec![HostSpec::new(a("2001:db8::5"), 4), HostSpec::new(a("2001:db8::5"), 6)],
            ..TopologySpec::default()
        };
        assert!(matches!(spec.validate(), Err(SimError::DuplicateHost(_))));
    }

    #[test]
    fn loop_peers_must_close() {
        let mut spec = TopologySpec {
            routers: vec![router("a", "b"), router("b", "a")],
            ..TopologySpec::default()
        };
        spec.validate().unwrap();
        spec.routers[1].behavior = RouterBehavior::Forward;
        assert!(matches!(spec.validate(), Err(SimError::OpenLoop(_))));
        spec.routers[1] = router("b", "zz");
        assert!(matches!(spec.validate(), Err(SimError::UnknownPeer { .. })));
    }

    #[test]
    fn three_router_cycle_is_accepted() {
        let spec = TopologySpec {
            routers: vec![router("a", "b"), router("b", "c"), router("c", "a")],
            ..TopologySpec::default()
        };
        spec.validate().unwrap();
    }

    #[test]
    fn hosts_cannot_sit_in_unassigned_space() {
        let spec = TopologySpec {
            hosts: vec![HostSpec::new(a("2001:db8:9::1"), 4)],
            unassigned: vec![p("2001:db8:9::/48")],
            ..TopologySpec::default()
        };
        assert!(matches!(spec.validate(), Err(SimError::HostInUnassigned { .. })));
    }

    #[test]
    fn toml_roundtrip() {
        let spec = TopologySpec {
            seed: 9,
            hosts: vec![HostSpec::new(a("2001:db8::5"), 4).service(ServiceSpec::udp(123, Responder::Ntp { stratum: 1 }))],
            periphery: vec![PeripherySpec::new(p("2001:db8:100::/40"), 56, 0.5)],
            ..TopologySpec::default()
        };
        assert_eq!(TopologySpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }
}
