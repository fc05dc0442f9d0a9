//! Transport backends and the name-keyed registry used to select one at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::prefix::Address;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown backend {name:?} (available: {available})")]
    Unknown { name: String, available: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("backend i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend closed")]
    Closed,
}

/// A datagram read from the wire together with the address it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub bytes: Vec<u8>,
    pub source: Address,
}

/// What a probe engine needs from a transport.
///
/// `now` is the scan clock: wall time for live transports, virtual time for
/// the simulator. `receive` blocks for at most `max_wait` of that clock.
pub trait Backend: Send {
    fn name(&self) -> &str;

    /// Source address stamped on outgoing probes.
    fn local_address(&self) -> Address;

    fn now(&self) -> Duration;

    fn send(&mut self, packet: &[u8], destination: Address) -> Result<(), BackendError>;

    fn receive(&mut self, max_wait: Duration) -> Result<Option<Datagram>, BackendError>;
}

/// Free-form options handed to a backend factory.
#[derive(Debug, Clone, Default)]
pub struct BackendConfig {
    pub seed: u64,
    pub options: BTreeMap<String, String>,
}

impl BackendConfig {
    pub fn new(seed: u64) -> Self {
        BackendConfig {
            seed,
            options: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.options.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.options.get(key).map(String::as_str)
    }
}

pub type BackendFactory = Box<dyn Fn(&BackendConfig) -> Result<Box<dyn Backend>, BackendError> + Send + Sync>;

/// Backends registered by name, e.g. `sim` and `live`.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRegistry").field("names", &self.names()).finish()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Registry with every backend compiled into this build.
    pub fn with_defaults() -> Self {
        let mut reg = BackendRegistry::empty();
        reg.register("sim", Box::new(crate::simnet::open_sim_backend));
        #[cfg(feature = "live")]
        reg.register("live", Box::new(super::live::open_live_backend));
        reg
    }

    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn open(&self, name: &str, config: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
        let factory = self.factories.get(name).ok_or_else(|| BackendError::Unknown {
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(config)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn local_address(&self) -> Address {
        (**self).local_address()
    }

    fn now(&self) -> Duration {
        (**self).now()
    }

    fn send(&mut self, packet: &[u8], destination: Address) -> Result<(), BackendError> {
        (**self).send(packet, destination)
    }

    fn receive(&mut self, max_wait: Duration) -> Result<Option<Datagram>, BackendError> {
        (**self).receive(max_wait)
    }
}
