use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;
use std::time::Duration;

use super::network::{build_topology, SimHandle};
use super::TopologySpec;
use crate::engine::{Backend, BackendConfig, BackendError, Datagram};
use crate::prefix::Address;

/// Monotone virtual time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock {
    now: Duration,
}

impl VirtualClock {
    pub fn now(&self) -> Duration {
        self.now
    }

    /// Moves forward to `t`; earlier instants are ignored.
    pub fn advance_to(&mut self, t: Duration) {
        self.now = self.now.max(t);
    }

    pub fn advance_by(&mut self, d: Duration) {
        self.now += d;
    }
}

type Arrival = (Duration, u64, Vec<u8>, Address);

/// Engine backend over a simulated network. Each backend has its own clock;
/// several may share one network.
pub struct SimBackend {
    net: SimHandle,
    local: Address,
    clock: VirtualClock,
    inbox: BinaryHeap<Reverse<Arrival>>,
    order: u64,
}

impl SimBackend {
    pub(super) fn new(net: SimHandle) -> SimBackend {
        let local = net.prober();
        SimBackend {
            net,
            local,
            clock: VirtualClock::default(),
            inbox: BinaryHeap::new(),
            order: 0,
        }
    }

    pub fn network(&self) -> &SimHandle {
        &self.net
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock
    }

    /// Responses scheduled but not yet received.
    pub fn in_flight(&self) -> usize {
        self.inbox.len()
    }
}

impl Backend for SimBackend {
    fn name(&self) -> &str {
        "sim"
    }

    fn local_address(&self) -> Address {
        self.local
    }

    fn now(&self) -> Duration {
        self.clock.now()
    }

    fn send(&mut self, packet: &[u8], _destination: Address) -> Result<(), BackendError> {
        for (bytes, at) in self.net.deliver(packet, self.clock.now()) {
            let source = crate::wire::Ipv6Header::parse(&bytes).map(|h| h.src).unwrap_or_default();
            self.order += 1;
            self.inbox.push(Reverse((at, self.order, bytes, source)));
        }
        Ok(())
    }

    fn receive(&mut self, max_wait: Duration) -> Result<Option<Datagram>, BackendError> {
        let deadline = self.clock.now() + max_wait;
        match self.inbox.peek() {
            Some(Reverse((at, ..))) if *at <= deadline => {
                let Reverse((at, _, bytes, source)) = self.inbox.pop().expect("peeked");
                self.clock.advance_to(at);
                Ok(Some(Datagram { bytes, source }))
            }
            _ => {
                self.clock.advance_to(deadline);
                Ok(None)
            }
        }
    }
}

/// Factory for the `sim` registry entry. Options: `topology=<path>` or
/// `topology_toml=<inline document>`. The config seed drives link randomness.
pub fn open_sim_backend(config: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
    let spec = match (config.get("topology"), config.get("topology_toml")) {
        (Some(path), _) => TopologySpec::load(Path::new(path)),
        (None, Some(text)) => TopologySpec::from_toml(text),
        (None, None) => return Err(BackendError::Config("sim backend needs topology=<file>".into())),
    }
    .map_err(|e| BackendError::Config(e.to_string()))?;
    let net = build_topology(&spec).map_err(|e| BackendError::Config(e.to_string()))?;
    net.reseed_link(spec.seed ^ config.seed);
    Ok(Box::new(net.backend()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::BackendRegistry;

    #[test]
    fn receive_advances_virtual_time() {
        let net = build_topology(&TopologySpec::default()).unwrap();
        let mut b = net.backend();
        assert_eq!(b.receive(Duration::from_secs(120)).unwrap(), None);
        assert_eq!(b.now(), Duration::from_secs(120));
    }

    #[test]
    fn registry_opens_sim_from_inline_toml() {
        let reg = BackendRegistry::with_defaults();
        let cfg = BackendConfig::new(1).with("topology_toml", "seed = 3\n[[hosts]]\naddress = \"2001:db8::1\"\n");
        let b = reg.open("sim", &cfg).unwrap();
        assert_eq!(b.name(), "sim");
        assert!(matches!(
            reg.open("sim", &BackendConfig::new(1)),
            Err(BackendError::Config(_))
        ));
        assert!(matches!(reg.open("nope", &cfg), Err(BackendError::Unknown { .. })));
    }
}
