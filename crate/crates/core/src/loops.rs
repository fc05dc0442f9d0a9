//! Routing-loop detection with ICMPv6 Time Exceeded feedback.
//!
//! A probe is sent toward an address that should not exist behind the device
//! under test. On a looping path the packet circulates until its hop limit
//! runs out, so the prober sees Time Exceeded. Seeing it again after raising
//! the hop limit by a small increment rules out a path that is merely long.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Probe, ProbeSpec, ResponsePayload, Scanner};
use crate::prefix::{slash64_of, Address, Prefix};
use crate::wire;

pub const DEFAULT_HOP_LIMIT: u8 = 32;
pub const DEFAULT_INCREMENT: u8 = 2;
pub const DEFAULT_TRIALS: u32 = 2;

/// Interface identifier placed in unassigned targets: ASCII "periscan".
pub const UNASSIGNED_IID: u64 = 0x7065_7269_7363_616e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "category", content = "detail", rename_all = "snake_case")]
pub enum IcmpClass {
    DestinationUnreachable(u8),
    TimeExceeded,
    EchoReply,
    Other(u8, u8),
}

pub fn classify_icmp(icmp_type: u8, icmp_code: u8) -> IcmpClass {
    match icmp_type {
        wire::ICMP_DEST_UNREACHABLE => IcmpClass::DestinationUnreachable(icmp_code),
        wire::ICMP_TIME_EXCEEDED => IcmpClass::TimeExceeded,
        wire::ICMP_ECHO_REPLY => IcmpClass::EchoReply,
        _ => IcmpClass::Other(icmp_type, icmp_code),
    }
}

/// Picks the address to probe for a device.
pub trait TargetStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn choose(&self, device: Address) -> Address;
}

/// The device's own /64 with a fixed interface identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OwnSlash64 {
    pub iid: u64,
}

impl Default for OwnSlash64 {
    fn default() -> Self {
        OwnSlash64 { iid: UNASSIGNED_IID }
    }
}

impl TargetStrategy for OwnSlash64 {
    fn name(&self) -> &str {
        "own-slash64"
    }

    fn choose(&self, device: Address) -> Address {
        Address(slash64_of(device).bits() | u128::from(self.iid))
    }
}

/// The last /64 of the delegation (default /56) around the device, or the
/// first one when the device itself sits in the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelegationTail {
    pub delegated_len: u8,
    pub iid: u64,
}

impl Default for DelegationTail {
    fn default() -> Self {
        DelegationTail {
            delegated_len: 56,
            iid: UNASSIGNED_IID,
        }
    }
}

impl TargetStrategy for DelegationTail {
    fn name(&self) -> &str {
        "delegation-tail"
    }

    fn choose(&self, device: Address) -> Address {
        let delegation = Prefix::new(device, self.delegated_len.min(64));
        let own = slash64_of(device);
        let last = slash64_of(delegation.last());
        let net = if last == own { delegation.bits() } else { last.bits() };
        Address(net | u128::from(self.iid))
    }
}

/// Target strategies by name.
#[derive(Debug, Clone)]
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Arc<dyn TargetStrategy>>,
}

impl StrategyRegistry {
    pub fn with_defaults() -> Self {
        let mut reg = StrategyRegistry {
            strategies: BTreeMap::new(),
        };
        reg.register(Arc::new(OwnSlash64::default()));
        reg.register(Arc::new(DelegationTail::default()));
        reg
    }

    pub fn register(&mut self, strategy: Arc<dyn TargetStrategy>) {
        self.strategies.insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TargetStrategy>> {
        self.strategies.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.strategies.keys().map(String::as_str).collect()
    }
}

/// Applies `strategy`, never returning the device's own address.
pub fn choose_unassigned_target(device: Address, strategy: &dyn TargetStrategy) -> Address {
    let target = strategy.choose(device);
    if target == device {
        Address(target.0 ^ 1)
    } else {
        target
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("initial hop limit must be at least 1")]
    ZeroHopLimit,
    #[error("increment must be at least 1")]
    ZeroIncrement,
    #[error("hop limit {0} plus increment {1} exceeds 255")]
    Overflow(u8, u8),
    #[error("at least one trial is required")]
    NoTrials,
}

#[derive(Debug, Clone)]
pub struct LoopProbePlan {
    pub initial_hop_limit: u8,
    pub increment: u8,
    pub trials: u32,
    pub strategy: Arc<dyn TargetStrategy>,
}

impl Default for LoopProbePlan {
    fn default() -> Self {
        LoopProbePlan {
            initial_hop_limit: DEFAULT_HOP_LIMIT,
            increment: DEFAULT_INCREMENT,
            trials: DEFAULT_TRIALS,
            strategy: Arc::new(OwnSlash64::default()),
        }
    }
}

impl LoopProbePlan {
    pub fn new(initial_hop_limit: u8, increment: u8, trials: u32) -> Result<LoopProbePlan, PlanError> {
        let plan = LoopProbePlan {
            initial_hop_limit,
            increment,
            trials,
            ..LoopProbePlan::default()
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_strategy(mut self, strategy: Arc<dyn TargetStrategy>) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.initial_hop_limit == 0 {
            return Err(PlanError::ZeroHopLimit);
        }
        if self.increment == 0 {
            return Err(PlanError::ZeroIncrement);
        }
        if u16::from(self.initial_hop_limit) + u16::from(self.increment) > 255 {
            return Err(PlanError::Overflow(self.initial_hop_limit, self.increment));
        }
        if self.trials == 0 {
            return Err(PlanError::NoTrials);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirmed,
    NotLooping,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub trial: u32,
    pub hop_limit_sent: u8,
    pub icmp_type: u8,
    pub icmp_code: u8,
    pub reporter: Address,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopEvidence {
    pub device: Address,
    pub target: Address,
    pub observations: Vec<Observation>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    First,
    Second,
    Done,
}

struct Probing {
    evidence: LoopEvidence,
    trial: u32,
    step: Step,
}

/// Runs the plan against one device.
pub fn probe_for_loop(device: Address, plan: &LoopProbePlan, scanner: &mut Scanner<'_>) -> LoopEvidence {
    probe_devices(&[device], plan, scanner).pop().expect("one device in, one out")
}

/// Runs the plan against every device. Probes for different devices share
/// rounds; each device still sees its own probes strictly in order. Devices
/// that map to the same target share each probe's outcome.
pub fn probe_devices(devices: &[Address], plan: &LoopProbePlan, scanner: &mut Scanner<'_>) -> Vec<LoopEvidence> {
    let mut state: Vec<Probing> = devices
        .iter()
        .map(|&device| Probing {
            evidence: LoopEvidence {
                device,
                target: choose_unassigned_target(device, plan.strategy.as_ref()),
                observations: Vec::new(),
                verdict: Verdict::Inconclusive,
                error: None,
            },
            trial: 1,
            step: Step::First,
        })
        .collect();
    if let Err(e) = plan.validate() {
        for s in &mut state {
            s.evidence.error = Some(e.to_string());
        }
        return state.into_iter().map(|s| s.evidence).collect();
    }
    let tag = scanner.payload_tag();

    loop {
        let mut round: BTreeMap<(Address, u8), Vec<usize>> = BTreeMap::new();
        for (i, s) in state.iter().enumerate() {
            let hop = match s.step {
                Step::First => plan.initial_hop_limit,
                Step::Second => plan.initial_hop_limit + plan.increment,
                Step::Done => continue,
            };
            round.entry((s.evidence.target, hop)).or_default().push(i);
        }
        if round.is_empty() {
            break;
        }
        let probes: Vec<Probe> = round
            .keys()
            .map(|&(target, hop)| Probe {
                target,
                spec: ProbeSpec::echo(hop, tag).expect("validated hop limit"),
            })
            .collect();
        let responses = match scanner.collect(probes) {
            Ok((responses, _)) => responses,
            Err(e) => {
                for s in state.iter_mut().filter(|s| s.step != Step::Done) {
                    s.evidence.verdict = Verdict::Inconclusive;
                    s.evidence.error = Some(e.to_string());
                    s.step = Step::Done;
                }
                break;
            }
        };
        let mut by_target: HashMap<Address, (Address, ResponsePayload)> = HashMap::new();
        for r in responses {
            by_target.insert(r.target, (r.source, r.payload));
        }

        for ((target, hop), members) in round {
            let outcome = by_target.get(&target);
            for i in members {
                let s = &mut state[i];
                let class = match outcome {
                    Some((
                        reporter,
                        ResponsePayload::Icmp {
                            icmp_type, icmp_code, ..
                        },
                    )) => {
                        s.evidence.observations.push(Observation {
                            trial: s.trial,
                            hop_limit_sent: hop,
                            icmp_type: *icmp_type,
                            icmp_code: *icmp_code,
                            reporter: *reporter,
                        });
                        Some(classify_icmp(*icmp_type, *icmp_code))
                    }
                    _ => None,
                };
                match (s.step, class) {
                    (Step::First, Some(IcmpClass::TimeExceeded)) => s.step = Step::Second,
                    (Step::First, Some(IcmpClass::EchoReply | IcmpClass::DestinationUnreachable(_))) => {
                        s.evidence.verdict = Verdict::NotLooping;
                        s.step = Step::Done;
                    }
                    (Step::Second, Some(IcmpClass::TimeExceeded)) if s.trial < plan.trials => {
                        s.trial += 1;
                        s.step = Step::First;
                    }
                    (Step::Second, Some(IcmpClass::TimeExceeded)) => {
                        s.evidence.verdict = Verdict::Confirmed;
                        s.step = Step::Done;
                    }
                    _ => {
                        s.evidence.verdict = Verdict::Inconclusive;
                        s.step = Step::Done;
                    }
                }
            }
        }
    }
    state.into_iter().map(|s| s.evidence).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn classification_table() {
        assert_eq!(classify_icmp(3, 0), IcmpClass::TimeExceeded);
        assert_eq!(classify_icmp(1, 0), IcmpClass::DestinationUnreachable(0));
        assert_eq!(classify_icmp(1, 3), IcmpClass::DestinationUnreachable(3));
        assert_eq!(classify_icmp(129, 0), IcmpClass::EchoReply);
        assert_eq!(classify_icmp(2, 0), IcmpClass::Other(2, 0));
    }

    #[test]
    fn default_plan() {
        let plan = LoopProbePlan::default();
        assert_eq!((plan.initial_hop_limit, plan.increment, plan.trials), (32, 2, 2));
        assert_eq!(plan.strategy.name(), "own-slash64");
        assert_eq!(LoopProbePlan::new(254, 2, 1).unwrap_err(), PlanError::Overflow(254, 2));
        assert_eq!(LoopProbePlan::new(32, 2, 0).unwrap_err(), PlanError::NoTrials);
    }

    #[test]
    fn own_slash64_target() {
        let t = choose_unassigned_target(a("2001:db8::1"), &OwnSlash64::default());
        assert_eq!(t, a("2001:db8::7065:7269:7363:616e"));
        let odd = a("2001:db8::7065:7269:7363:616e");
        assert_ne!(choose_unassigned_target(odd, &OwnSlash64::default()), odd);
    }

    #[test]
    fn delegation_tail_target() {
        let s = DelegationTail::default();
        assert_eq!(s.choose(a("2001:db8:0:100::1")), a("2001:db8:0:1ff:7065:7269:7363:616e"));
        assert_eq!(s.choose(a("2001:db8:0:1ff::1")), a("2001:db8:0:100:7065:7269:7363:616e"));
    }

    #[test]
    fn registry_lookup() {
        let reg = StrategyRegistry::with_defaults();
        assert_eq!(reg.names(), vec!["delegation-tail", "own-slash64"]);
        assert!(reg.get("own-slash64").is_some());
        assert!(reg.get("random").is_none());
    }
}
