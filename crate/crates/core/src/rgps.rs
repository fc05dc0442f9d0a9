//! Response-guided prefix selection.
//!
//! Announced prefixes are gated by length. Prefixes in the scan-worthy range
//! are probed directly; shorter ones are sampled first and replaced by the
//! fixed-length children that answered. A candidate whose responses stop for
//! longer than `tau` is dropped before its scan completes.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Flow, ProbeResponse, ProbeSpec, ScanError, ScanSink, Scanner};
use crate::loops::UNASSIGNED_IID;
use crate::prefix::{classify_length, Address, LengthClass, Prefix, MAX_CANDIDATE_LEN, MIN_CANDIDATE_LEN};
use crate::target::{TargetError, TargetSpace};

pub const DEFAULT_TAU: Duration = Duration::from_secs(120);
pub const DEFAULT_EXPLORATORY_BUDGET: u64 = 1 << 16;
pub const DEFAULT_CHILD_LEN: u8 = 28;
pub const DEFAULT_SCAN_BUDGET: u64 = 4096;
const PROBE_HOP_LIMIT: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgpsConfig {
    #[serde(with = "duration_secs")]
    pub tau: Duration,
    pub exploratory_budget: u64,
    pub child_len: u8,
    /// Probes spent on each candidate; one probe per sampled /64.
    pub scan_budget: u64,
    /// Interface identifier for the probed address inside each /64.
    pub iid: u64,
    pub seed: u64,
}

impl Default for RgpsConfig {
    fn default() -> Self {
        RgpsConfig {
            tau: DEFAULT_TAU,
            exploratory_budget: DEFAULT_EXPLORATORY_BUDGET,
            child_len: DEFAULT_CHILD_LEN,
            scan_budget: DEFAULT_SCAN_BUDGET,
            iid: UNASSIGNED_IID,
            seed: 0,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("tau must be positive")]
    ZeroTau,
    #[error("exploratory budget must be at least 1")]
    ZeroExploratoryBudget,
    #[error("scan budget must be at least 1")]
    ZeroScanBudget,
    #[error("child length {0} outside {MIN_CANDIDATE_LEN}..={MAX_CANDIDATE_LEN}")]
    ChildLen(u8),
}

impl RgpsConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tau.is_zero() {
            return Err(ConfigError::ZeroTau);
        }
        if self.exploratory_budget == 0 {
            return Err(ConfigError::ZeroExploratoryBudget);
        }
        if self.scan_budget == 0 {
            return Err(ConfigError::ZeroScanBudget);
        }
        if !(MIN_CANDIDATE_LEN..=MAX_CANDIDATE_LEN).contains(&self.child_len) {
            return Err(ConfigError::ChildLen(self.child_len));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooLong,
    SilentTimeout,
    NoActiveChildren,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::TooLong => "too_long",
            RejectReason::SilentTimeout => "silent_timeout",
            RejectReason::NoActiveChildren => "no_active_children",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RgpsOutcome {
    pub good: BTreeSet<Prefix>,
    pub rejected: Vec<(Prefix, RejectReason)>,
    pub derived: BTreeMap<Prefix, Vec<Prefix>>,
    /// Every non-timeout response seen while scanning candidates, including
    /// those of candidates stopped for silence.
    pub responses: Vec<ProbeResponse>,
}

impl RgpsOutcome {
    /// Distinct responding addresses in ascending order.
    pub fn responders(&self) -> Vec<Address> {
        self.responses
            .iter()
            .map(|r| r.source)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum RgpsError {
    #[error("empty prefix pool")]
    EmptyPool,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("target generation for {prefix}: {source}")]
    Targets {
        prefix: Prefix,
        #[source]
        source: TargetError,
    },
    #[error("scan of {prefix} failed: {source}")]
    Scan {
        prefix: Prefix,
        #[source]
        source: ScanError,
        partial: Box<RgpsOutcome>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("response source {source_addr} lies outside {parent}")]
pub struct ForeignSource {
    pub source_addr: Address,
    pub parent: Prefix,
}

/// Distinct `child_len` prefixes covering at least one response source, ascending.
pub fn derive_active_subprefixes(
    responses: &[ProbeResponse],
    parent: &Prefix,
    child_len: u8,
) -> Result<Vec<Prefix>, ForeignSource> {
    let mut children = BTreeSet::new();
    for r in responses {
        if !parent.contains(r.source) {
            return Err(ForeignSource {
                source_addr: r.source,
                parent: parent.clone(),
            });
        }
        children.insert(Prefix::new(r.source, child_len));
    }
    Ok(children
        .into_iter()
        .map(|mut c| {
            c.meta = parent.meta.clone();
            c
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SilenceVerdict {
    FireAt(Duration),
    NeverFires,
}

/// Finds the first gap longer than `tau` among scan start, the sorted event
/// times and the end of the scan at `scan_clock`.
pub fn silence_monitor(response_times: &[Duration], scan_clock: Duration, tau: Duration) -> SilenceVerdict {
    let mut last = Duration::ZERO;
    for &t in response_times.iter().chain(std::iter::once(&scan_clock)) {
        if t.saturating_sub(last) > tau {
            return SilenceVerdict::FireAt(last + tau);
        }
        last = last.max(t);
    }
    SilenceVerdict::NeverFires
}

/// Stops a scan as soon as the response gap exceeds `tau`.
#[derive(Debug)]
struct SilenceSink {
    tau: Duration,
    last_event: Duration,
    fired: Option<Duration>,
    responses: Vec<ProbeResponse>,
}

impl SilenceSink {
    fn new(tau: Duration) -> Self {
        SilenceSink {
            tau,
            last_event: Duration::ZERO,
            fired: None,
            responses: Vec::new(),
        }
    }

    fn check(&mut self, now: Duration) -> Flow {
        if now.saturating_sub(self.last_event) > self.tau {
            self.fired = Some(self.last_event + self.tau);
            Flow::Stop
        } else {
            Flow::Continue
        }
    }
}

impl ScanSink for SilenceSink {
    fn on_response(&mut self, response: ProbeResponse) -> Flow {
        if response.payload.is_timeout() {
            return self.check(response.at);
        }
        if self.check(response.at) == Flow::Stop {
            return Flow::Stop;
        }
        self.last_event = self.last_event.max(response.at);
        self.responses.push(response);
        Flow::Continue
    }

    fn on_tick(&mut self, elapsed: Duration) -> Flow {
        self.check(elapsed)
    }

    fn next_deadline(&self) -> Option<Duration> {
        Some(self.last_event + self.tau + Duration::from_nanos(1))
    }
}

fn prefix_seed(seed: u64, p: &Prefix) -> u64 {
    let bits = p.bits();
    seed ^ (bits >> 64) as u64 ^ (bits as u64).rotate_left(17) ^ u64::from(p.len()).rotate_left(41)
}

fn sample_targets(p: &Prefix, budget: u64, cfg: &RgpsConfig) -> Result<Vec<Address>, RgpsError> {
    let err = |source| RgpsError::Targets {
        prefix: p.clone(),
        source,
    };
    let gran = p.len().max(64);
    let space = TargetSpace::with_granularity(vec![p.clone()], gran, u128::from(cfg.iid)).map_err(err)?;
    let iter = space.permuted(prefix_seed(cfg.seed, p)).map_err(err)?;
    Ok(iter.take(usize::try_from(budget).unwrap_or(usize::MAX)).collect())
}

/// Runs response-guided selection over `pool`.
pub fn select_good_prefixes(pool: &[Prefix], cfg: &RgpsConfig, scanner: &mut Scanner<'_>) -> Result<RgpsOutcome, RgpsError> {
    if pool.is_empty() {
        return Err(RgpsError::EmptyPool);
    }
    cfg.validate()?;
    let spec = ProbeSpec::echo(PROBE_HOP_LIMIT, scanner.payload_tag()).expect("non-zero hop limit");
    let mut out = RgpsOutcome::default();

    let mut candidates: Vec<Prefix> = Vec::new();
    for p in pool {
        match classify_length(p) {
            LengthClass::TooLong => out.rejected.push((p.clone(), RejectReason::TooLong)),
            LengthClass::InRange => candidates.push(p.clone()),
            LengthClass::TooShort => {
                let targets = sample_targets(p, cfg.exploratory_budget, cfg)?;
                let mut seen: Vec<ProbeResponse> = Vec::new();
                let scan = scanner.run_scan(targets, &spec, &mut |r: ProbeResponse| {
                    if !r.payload.is_timeout() && p.contains(r.source) {
                        seen.push(r);
                    }
                    Flow::Continue
                });
                if let Err(source) = scan {
                    return Err(RgpsError::Scan {
                        prefix: p.clone(),
                        source,
                        partial: Box::new(out),
                    });
                }
                let children =
                    derive_active_subprefixes(&seen, p, cfg.child_len).expect("responses outside the parent were filtered");
                log::debug!("{p}: {} active children from {} responses", children.len(), seen.len());
                if children.is_empty() {
                    out.rejected.push((p.clone(), RejectReason::NoActiveChildren));
                } else {
                    candidates.extend(children.iter().cloned());
                    out.derived.insert(p.clone(), children);
                }
            }
        }
    }

    for c in candidates {
        let targets = sample_targets(&c, cfg.scan_budget, cfg)?;
        let mut sink = SilenceSink::new(cfg.tau);
        let summary = match scanner.run_scan(targets, &spec, &mut sink) {
            Ok(s) => s,
            Err(source) => {
                out.responses.append(&mut sink.responses);
                return Err(RgpsError::Scan {
                    prefix: c,
                    source,
                    partial: Box::new(out),
                });
            }
        };
        let times: Vec<Duration> = sink.responses.iter().map(|r| r.at).collect();
        let silent = sink.fired.is_some()
            || sink.responses.is_empty()
            || silence_monitor(&times, summary.elapsed(), cfg.tau) != SilenceVerdict::NeverFires;
        log::debug!(
            "{c}: {} responses over {:?}, silent={silent}",
            sink.responses.len(),
            summary.elapsed()
        );
        out.responses.append(&mut sink.responses);
        if silent {
            out.rejected.push((c, RejectReason::SilentTimeout));
        } else {
            out.good.insert(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ProbeId, RateLimit, ResponsePayload};
    use crate::simnet::{build_topology, PeripherySpec, TopologySpec};
    use proptest::prelude::*;

    fn p(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn reply_from(addr: Address) -> ProbeResponse {
        ProbeResponse {
            target: addr,
            source: addr,
            payload: ResponsePayload::Icmp {
                icmp_type: 129,
                icmp_code: 0,
                echoed_hop_limit: 64,
            },
            rtt: Duration::ZERO,
            at: Duration::ZERO,
            probe_id: ProbeId(1),
            port: None,
        }
    }

    fn secs(s: u64) -> Duration {
        Duration::from_secs(s)
    }

    #[test]
    fn silence_examples() {
        assert_eq!(
            silence_monitor(&[secs(0)], secs(600), secs(120)),
            SilenceVerdict::FireAt(secs(120))
        );
        let every_minute: Vec<_> = (0..10).map(|i| secs(60 * i)).collect();
        assert_eq!(
            silence_monitor(&every_minute, secs(540), secs(120)),
            SilenceVerdict::NeverFires
        );
        assert_eq!(silence_monitor(&[], secs(600), secs(120)), SilenceVerdict::FireAt(secs(120)));
        assert_eq!(silence_monitor(&[], secs(120), secs(120)), SilenceVerdict::NeverFires);
        assert_eq!(
            silence_monitor(&[secs(10), secs(200)], secs(210), secs(120)),
            SilenceVerdict::FireAt(secs(130))
        );
    }

    #[test]
    fn derive_groups_by_child() {
        let parent = p("2001:db8::/24");
        let responses: Vec<_> = ["2001:db8::1", "2001:dbf:1::1", "2001:d71::1"]
            .iter()
            .map(|s| reply_from(s.parse().unwrap()))
            .collect();
        assert_eq!(
            derive_active_subprefixes(&responses, &parent, 28).unwrap(),
            vec![p("2001:d70::/28"), p("2001:db0::/28")]
        );
        assert!(derive_active_subprefixes(&[], &parent, 28).unwrap().is_empty());
        let foreign = reply_from("2002::1".parse().unwrap());
        assert!(derive_active_subprefixes(&[foreign], &parent, 28).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(RgpsConfig::default().validate().is_ok());
        let bad = RgpsConfig {
            child_len: 50,
            ..RgpsConfig::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::ChildLen(50)));
        let bad = RgpsConfig {
            tau: Duration::ZERO,
            ..RgpsConfig::default()
        };
        assert_eq!(bad.validate(), Err(ConfigError::ZeroTau));
    }

    fn small_cfg() -> RgpsConfig {
        RgpsConfig {
            exploratory_budget: 2048,
            scan_budget: 256,
            seed: 3,
            ..RgpsConfig::default()
        }
    }

    #[test]
    fn populated_and_silent_slash32() {
        let spec = TopologySpec {
            periphery: vec![PeripherySpec::new(p("2400:1::/32"), 56, 1.0)],
            ..TopologySpec::default()
        };
        let net = build_topology(&spec).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(10).unwrap(), 1);
        let out = select_good_prefixes(&[p("2400:1::/32"), p("2400:2::/32"), p("2400:3::/64")], &small_cfg(), &mut s).unwrap();
        assert_eq!(out.good, BTreeSet::from([p("2400:1::/32")]));
        assert!(out.rejected.contains(&(p("2400:2::/32"), RejectReason::SilentTimeout)));
        assert!(out.rejected.contains(&(p("2400:3::/64"), RejectReason::TooLong)));
        assert!(!out.responses.is_empty());
    }

    #[test]
    fn short_prefix_decomposes_into_live_children() {
        let spec = TopologySpec {
            periphery: vec![
                PeripherySpec::new(p("2400:8810::/28"), 48, 1.0),
                PeripherySpec::new(p("2400:8870::/28"), 48, 1.0),
            ],
            ..TopologySpec::default()
        };
        let net = build_topology(&spec).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(1000).unwrap(), 1);
        let out = select_good_prefixes(&[p("2400:8800::/24")], &small_cfg(), &mut s).unwrap();
        let expected = BTreeSet::from([p("2400:8810::/28"), p("2400:8870::/28")]);
        assert_eq!(out.good, expected);
        assert_eq!(out.derived[&p("2400:8800::/24")], expected.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn empty_short_prefix_has_no_children() {
        let net = build_topology(&TopologySpec::default()).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(10_000).unwrap(), 1);
        let out = select_good_prefixes(&[p("2400::/20")], &small_cfg(), &mut s).unwrap();
        assert!(out.good.is_empty());
        assert_eq!(out.rejected, vec![(p("2400::/20"), RejectReason::NoActiveChildren)]);
    }

    #[test]
    fn silent_candidate_stops_at_tau() {
        let net = build_topology(&TopologySpec::default()).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(1).unwrap(), 1);
        let cfg = RgpsConfig {
            scan_budget: 600,
            ..small_cfg()
        };
        let out = select_good_prefixes(&[p("2400:1::/32")], &cfg, &mut s).unwrap();
        assert_eq!(out.rejected, vec![(p("2400:1::/32"), RejectReason::SilentTimeout)]);
        assert!(s.now() < secs(130), "scan ran to {:?}", s.now());
    }

    #[test]
    fn larger_tau_never_shrinks_good() {
        let spec = TopologySpec {
            periphery: vec![
                PeripherySpec::new(p("2400:1::/32"), 56, 1.0 / 40.0),
                PeripherySpec::new(p("2400:2::/32"), 56, 1.0 / 200.0),
                PeripherySpec::new(p("2400:3::/32"), 56, 1.0),
            ],
            ..TopologySpec::default()
        };
        let pool = [p("2400:1::/32"), p("2400:2::/32"), p("2400:3::/32")];
        let run = |tau: u64| {
            let net = build_topology(&spec).unwrap();
            let mut b = net.backend();
            let mut s = Scanner::new(&mut b, RateLimit::new(1).unwrap(), 5);
            let cfg = RgpsConfig {
                tau: secs(tau),
                scan_budget: 300,
                ..small_cfg()
            };
            select_good_prefixes(&pool, &cfg, &mut s).unwrap().good
        };
        let mut previous = BTreeSet::new();
        for tau in [15, 60, 120, 400] {
            let good = run(tau);
            assert!(
                good.is_superset(&previous),
                "tau {tau}: {good:?} lost members of {previous:?}"
            );
            previous = good;
        }
        assert!(previous.contains(&p("2400:3::/32")));
    }

    fn gap_oracle(events: &[u64], end: u64, tau: u64) -> Option<u64> {
        let mut points = vec![0];
        points.extend_from_slice(events);
        points.push(end.max(*events.last().unwrap_or(&0)));
        points.windows(2).find(|w| w[1] - w[0] > tau).map(|w| w[0] + tau)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn derive_ignores_order(
            offsets in proptest::collection::vec(any::<u128>(), 0..60),
            rot in 0usize..60,
        ) {
            let parent = p("2a00::/20");
            let mut responses: Vec<_> = offsets
                .iter()
                .map(|o| reply_from(Address(parent.bits() | (o >> 20))))
                .collect();
            let a = derive_active_subprefixes(&responses, &parent, 28).unwrap();
            let brute: BTreeSet<Prefix> = responses.iter().map(|r| Prefix::new(r.source, 28)).collect();
            prop_assert_eq!(&a, &brute.into_iter().collect::<Vec<_>>());
            if !responses.is_empty() {
                let k = rot % responses.len();
                responses.rotate_left(k);
                responses.reverse();
            }
            prop_assert_eq!(a, derive_active_subprefixes(&responses, &parent, 28).unwrap());
        }

        #[test]
        fn silence_matches_gap_oracle(
            mut events in proptest::collection::vec(0u64..10_000, 0..30),
            tail in 0u64..3_000,
            tau in 1u64..2_000,
        ) {
            events.sort_unstable();
            let end = events.last().copied().unwrap_or(0) + tail;
            let times: Vec<Duration> = events.iter().map(|&e| Duration::from_millis(e)).collect();
            let got = silence_monitor(&times, Duration::from_millis(end), Duration::from_millis(tau));
            let want = gap_oracle(&events, end, tau)
                .map_or(SilenceVerdict::NeverFires, |t| SilenceVerdict::FireAt(Duration::from_millis(t)));
            prop_assert_eq!(got, want);
        }
    }
}
