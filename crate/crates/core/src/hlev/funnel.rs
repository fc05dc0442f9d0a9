use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Tool, ToolProfile, BODY_WINDOW};
use crate::engine::{Probe, ProbeResponse, ProbeSpec, ResponsePayload, ScanError, Scanner, Transport};
use crate::prefix::Address;
use crate::proto;

const HEADER_ALLOWANCE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Response0,
    Response1,
    Response2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum Rejection {
    /// No HTTP response on the port.
    NoHttp,
    SignatureMismatch,
    AuthRequired,
    ConfirmStatus(u16),
    Unparseable,
    EmptyModels,
    UnknownModels,
    /// The profile has no model-level endpoint.
    NoConfirmRule,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub syn_ack: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_line: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HlevCandidate {
    pub address: Address,
    pub port: u16,
    pub tool: Tool,
    pub stage: Stage,
    pub evidence: Evidence,
    /// Why the candidate stopped at its stage, if it was turned away.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub probed: u64,
    pub r0: u64,
    pub r1: u64,
    pub r2: u64,
}

impl FunnelStats {
    pub fn is_monotone(&self) -> bool {
        self.r2 <= self.r1 && self.r1 <= self.r0 && self.r0 <= self.probed
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HlevReport {
    /// Candidates that reached Response 2.
    pub exposed: Vec<HlevCandidate>,
    /// Every candidate with the stage it reached.
    pub candidates: Vec<HlevCandidate>,
    pub stats: BTreeMap<Tool, FunnelStats>,
}

#[derive(Debug, Error)]
pub enum HlevError {
    #[error("scan failed during HLEV: {source}")]
    Scan {
        #[source]
        source: ScanError,
        partial: Box<HlevReport>,
    },
}

/// Known model names, one per line; blank lines and `#` comments ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnownModels {
    names: Vec<String>,
}

impl KnownModels {
    pub fn parse(text: &str) -> KnownModels {
        KnownModels {
            names: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        }
    }

    pub fn shipped() -> KnownModels {
        KnownModels::parse(include_str!("../../fixtures/known_models.txt"))
    }

    /// True if some known name occurs in `model`, ignoring case.
    pub fn recognizes(&self, model: &str) -> bool {
        let model = model.to_lowercase();
        self.names.iter().any(|n| model.contains(n.as_str()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn profile_for(profiles: &[ToolProfile], tool: Tool) -> Option<&ToolProfile> {
    profiles.iter().find(|p| p.tool == tool)
}

fn get_probe(address: Address, port: u16, path: &str) -> Probe {
    Probe {
        target: address,
        spec: ProbeSpec::app(
            Transport::Tcp,
            port,
            proto::http_get(path, &format!("[{address}]:{port}")),
            BODY_WINDOW + HEADER_ALLOWANCE,
        )
        .expect("port is non-zero"),
    }
}

fn by_flow(responses: Vec<ProbeResponse>) -> HashMap<(Address, u16), ResponsePayload> {
    responses
        .into_iter()
        .filter_map(|r| Some(((r.target, r.port?), r.payload)))
        .collect()
}

/// Collects responses, keeping whatever arrived before a failure.
fn collect_partial(scanner: &mut Scanner<'_>, probes: Vec<Probe>) -> (Vec<ProbeResponse>, Option<ScanError>) {
    let mut out = Vec::new();
    match scanner.run(probes, &mut out) {
        Ok(_) => (out, None),
        Err(e) => (out, Some(e)),
    }
}

/// SYN-probes every address on every profile port; a candidate per profile
/// whose port answered SYN-ACK.
pub fn stage0_syn_sweep<I>(
    addresses: I,
    profiles: &[ToolProfile],
    scanner: &mut Scanner<'_>,
) -> Result<Vec<HlevCandidate>, HlevError>
where
    I: IntoIterator<Item = Address>,
{
    let (candidates, _, err) = sweep(addresses, profiles, scanner);
    match err {
        None => Ok(candidates),
        Some(source) => Err(HlevError::Scan {
            source,
            partial: Box::new(HlevReport {
                candidates,
                ..HlevReport::default()
            }),
        }),
    }
}

fn sweep<I>(addresses: I, profiles: &[ToolProfile], scanner: &mut Scanner<'_>) -> (Vec<HlevCandidate>, u64, Option<ScanError>)
where
    I: IntoIterator<Item = Address>,
{
    let ports: BTreeSet<u16> = profiles.iter().map(|p| p.port).collect();
    let mut count = 0u64;
    let mut probes = Vec::new();
    for address in addresses {
        count += 1;
        for &port in &ports {
            probes.push(Probe {
                target: address,
                spec: ProbeSpec::syn(port).expect("profile port is non-zero"),
            });
        }
    }
    let (responses, err) = collect_partial(scanner, probes);
    let mut open: Vec<(Address, u16)> = responses
        .into_iter()
        .filter(|r| r.payload == ResponsePayload::SynAck)
        .filter_map(|r| Some((r.target, r.port?)))
        .collect();
    open.sort();
    open.dedup();
    let mut candidates = Vec::new();
    for (address, port) in open {
        for p in profiles.iter().filter(|p| p.port == port) {
            candidates.push(HlevCandidate {
                address,
                port,
                tool: p.tool,
                stage: Stage::Response0,
                evidence: Evidence {
                    syn_ack: true,
                    ..Evidence::default()
                },
                rejection: None,
            });
        }
    }
    (candidates, count, err)
}

fn judge_landing(mut c: HlevCandidate, profile: &ToolProfile, payload: Option<&ResponsePayload>) -> HlevCandidate {
    match payload {
        Some(p @ ResponsePayload::AppPayload { status_line, .. }) if !status_line.is_empty() => {
            c.evidence.status_line = Some(status_line.clone());
            if profile.signature_matches(p) {
                c.stage = Stage::Response1;
                c.evidence.signature = Some(profile.describe());
            } else {
                c.rejection = Some(Rejection::SignatureMismatch);
            }
        }
        _ => c.rejection = Some(Rejection::NoHttp),
    }
    c
}

/// Stage 1 for many candidates at once. Candidates whose tool has no profile
/// are rejected with `SignatureMismatch`.
pub fn stage1_verify_batch(
    candidates: Vec<HlevCandidate>,
    profiles: &[ToolProfile],
    scanner: &mut Scanner<'_>,
) -> (Vec<HlevCandidate>, Option<ScanError>) {
    let flows: BTreeSet<(Address, u16)> = candidates.iter().map(|c| (c.address, c.port)).collect();
    let probes = flows.iter().map(|&(a, p)| get_probe(a, p, "/")).collect();
    let (responses, err) = collect_partial(scanner, probes);
    let got = by_flow(responses);
    let out = candidates
        .into_iter()
        .map(|c| match profile_for(profiles, c.tool) {
            Some(profile) if c.stage == Stage::Response0 => {
                let payload = got.get(&(c.address, c.port));
                judge_landing(c, profile, payload)
            }
            Some(_) => c,
            None => HlevCandidate {
                rejection: Some(Rejection::SignatureMismatch),
                ..c
            },
        })
        .collect();
    (out, err)
}

pub fn stage1_http_verify(
    c: HlevCandidate,
    profile: &ToolProfile,
    scanner: &mut Scanner<'_>,
) -> Result<HlevCandidate, (HlevCandidate, Rejection)> {
    let (mut out, _) = stage1_verify_batch(vec![c], std::slice::from_ref(profile), scanner);
    let c = out.pop().expect("one in, one out");
    match c.rejection.clone() {
        None => Ok(c),
        Some(r) => Err((c, r)),
    }
}

fn judge_confirm(
    mut c: HlevCandidate,
    profile: &ToolProfile,
    known: &KnownModels,
    payload: Option<&ResponsePayload>,
) -> HlevCandidate {
    let Some(rule) = &profile.confirm else {
        c.rejection = Some(Rejection::NoConfirmRule);
        return c;
    };
    let Some(ResponsePayload::AppPayload {
        status_line,
        body_prefix,
        ..
    }) = payload
    else {
        c.rejection = Some(Rejection::NoHttp);
        return c;
    };
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    c.rejection = match status {
        401 | 403 => Some(Rejection::AuthRequired),
        200..=299 => match rule.kind.extract(body_prefix) {
            None => Some(Rejection::Unparseable),
            Some(models) if models.is_empty() => Some(Rejection::EmptyModels),
            Some(models) if !models.iter().any(|m| known.recognizes(m)) => {
                c.evidence.models = models;
                Some(Rejection::UnknownModels)
            }
            Some(models) => {
                c.evidence.models = models;
                c.stage = Stage::Response2;
                None
            }
        },
        0 => Some(Rejection::NoHttp),
        other => Some(Rejection::ConfirmStatus(other)),
    };
    c
}

/// Stage 2 for many candidates at once; candidates not at Response 1 pass through.
pub fn stage2_confirm_batch(
    candidates: Vec<HlevCandidate>,
    profiles: &[ToolProfile],
    known: &KnownModels,
    scanner: &mut Scanner<'_>,
) -> (Vec<HlevCandidate>, Option<ScanError>) {
    let mut flows: BTreeMap<(Address, u16), String> = BTreeMap::new();
    for c in &candidates {
        if c.stage != Stage::Response1 {
            continue;
        }
        if let Some(rule) = profile_for(profiles, c.tool).and_then(|p| p.confirm.as_ref()) {
            flows.insert((c.address, c.port), rule.path.clone());
        }
    }
    let probes = flows.iter().map(|(&(a, p), path)| get_probe(a, p, path)).collect();
    let (responses, err) = collect_partial(scanner, probes);
    let got = by_flow(responses);
    let out = candidates
        .into_iter()
        .map(|c| match profile_for(profiles, c.tool) {
            Some(profile) if c.stage == Stage::Response1 => {
                let payload = got.get(&(c.address, c.port));
                judge_confirm(c, profile, known, payload)
            }
            _ => c,
        })
        .collect();
    (out, err)
}

pub fn stage2_model_confirm(
    c: HlevCandidate,
    profile: &ToolProfile,
    known: &KnownModels,
    scanner: &mut Scanner<'_>,
) -> Result<HlevCandidate, (HlevCandidate, Rejection)> {
    let (mut out, _) = stage2_confirm_batch(vec![c], std::slice::from_ref(profile), known, scanner);
    let c = out.pop().expect("one in, one out");
    match c.rejection.clone() {
        None if c.stage == Stage::Response2 => Ok(c),
        None => Err((c, Rejection::NoConfirmRule)),
        Some(r) => Err((c, r)),
    }
}

fn tally(profiles: &[ToolProfile], probed: u64, candidates: &[HlevCandidate]) -> BTreeMap<Tool, FunnelStats> {
    let mut stats: BTreeMap<Tool, FunnelStats> = profiles
        .iter()
        .map(|p| {
            (
                p.tool,
                FunnelStats {
                    probed,
                    ..FunnelStats::default()
                },
            )
        })
        .collect();
    for c in candidates {
        let s = stats.entry(c.tool).or_default();
        s.r0 += 1;
        if c.stage >= Stage::Response1 {
            s.r1 += 1;
        }
        if c.stage == Stage::Response2 {
            s.r2 += 1;
        }
    }
    stats
}

/// Runs all three stages over `addresses`.
pub fn run_hlev<I>(
    addresses: I,
    profiles: &[ToolProfile],
    known: &KnownModels,
    scanner: &mut Scanner<'_>,
) -> Result<HlevReport, HlevError>
where
    I: IntoIterator<Item = Address>,
{
    let finish = |candidates: Vec<HlevCandidate>, probed: u64| {
        let stats = tally(profiles, probed, &candidates);
        let exposed = candidates.iter().filter(|c| c.stage == Stage::Response2).cloned().collect();
        HlevReport {
            exposed,
            candidates,
            stats,
        }
    };
    let fail = |source, report| HlevError::Scan {
        source,
        partial: Box::new(report),
    };

    let (candidates, probed, err) = sweep(addresses, profiles, scanner);
    if let Some(e) = err {
        return Err(fail(e, finish(candidates, probed)));
    }
    let (candidates, err) = stage1_verify_batch(candidates, profiles, scanner);
    if let Some(e) = err {
        return Err(fail(e, finish(candidates, probed)));
    }
    let (candidates, err) = stage2_confirm_batch(candidates, profiles, known, scanner);
    let report = finish(candidates, probed);
    match err {
        Some(e) => Err(fail(e, report)),
        None => Ok(report),
    }
}
