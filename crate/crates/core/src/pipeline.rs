//! The full measurement run: prefix selection, device discovery, loop
//! detection, service exposure, LLM exposure and reports, in that order, on
//! one backend.

use std::collections::BTreeSet;
use std::time::Duration;

use thiserror::Error;

use crate::engine::{Backend, ProbeResponse, ProbeSpec, RateLimit, ScanError, Scanner};
use crate::hlev::{run_hlev, shipped_profiles, HlevError, HlevReport, KnownModels, ToolProfile};
use crate::loops::{probe_devices, LoopEvidence, LoopProbePlan, Verdict, UNASSIGNED_IID};
use crate::prefix::{Address, Prefix, PrefixMeta};
use crate::report::{self, aggregate, dedupe_devices, Flagged, GroupKey, PercentDef, PeripheryDevice, Report};
use crate::rgps::{select_good_prefixes, RgpsConfig, RgpsError, RgpsOutcome};
use crate::services::{annotate, scan_many, CveDb, ExposureRecord, ServiceId, ServiceScanError, ServiceScanOptions, VendorRules};
use crate::target::{TargetError, TargetSpace};

pub const DEFAULT_DISCOVERY_BUDGET: u64 = 1 << 16;

/// Settings for device discovery over the selected prefixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoveryConfig {
    /// Sampled /64s across all prefixes.
    pub budget: u64,
    pub iid: u64,
    pub seed: u64,
    /// `(k, n)`: this run takes every n-th target starting at k.
    pub shard: (usize, usize),
    pub hop_limit: u8,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            budget: DEFAULT_DISCOVERY_BUDGET,
            iid: UNASSIGNED_IID,
            seed: 0,
            shard: (0, 1),
            hop_limit: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("target generation: {0}")]
    Targets(#[from] TargetError),
    #[error("discovery scan: {source}")]
    Scan {
        #[source]
        source: ScanError,
        partial: Vec<ProbeResponse>,
    },
}

/// Echo-probes a permuted sample of /64s across `prefixes`.
pub fn discover(
    prefixes: &[Prefix],
    cfg: &DiscoveryConfig,
    scanner: &mut Scanner<'_>,
) -> Result<Vec<ProbeResponse>, DiscoveryError> {
    if prefixes.is_empty() {
        return Ok(Vec::new());
    }
    let gran = prefixes.iter().map(Prefix::len).max().unwrap_or(64).max(64);
    let space = TargetSpace::with_granularity(prefixes.to_vec(), gran, u128::from(cfg.iid))?;
    let (k, n) = cfg.shard;
    let targets = space.permuted(cfg.seed)?.shard(k, n)?;
    let budget = usize::try_from(cfg.budget).unwrap_or(usize::MAX);
    let spec = ProbeSpec::echo(cfg.hop_limit.max(1), scanner.payload_tag()).expect("non-zero hop limit");
    let mut out = Vec::new();
    match scanner.run_scan(targets.take(budget), &spec, &mut out) {
        Ok(_) => {
            out.retain(|r| !r.payload.is_timeout());
            Ok(out)
        }
        Err(source) => {
            out.retain(|r| !r.payload.is_timeout());
            Err(DiscoveryError::Scan { source, partial: out })
        }
    }
}

/// Everything a run needs besides the prefix pool and the backend.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub rgps: RgpsConfig,
    pub discovery: DiscoveryConfig,
    pub loop_plan: LoopProbePlan,
    pub services: BTreeSet<ServiceId>,
    pub service_options: ServiceScanOptions,
    pub cve_db: CveDb,
    pub vendor_rules: VendorRules,
    pub profiles: Vec<ToolProfile>,
    pub known_models: KnownModels,
    /// Addresses added to the service and LLM stages besides discovered devices.
    pub extra_targets: Vec<Address>,
    pub rate: RateLimit,
    pub session: u32,
    /// Overrides every probe's timeout when set.
    pub probe_timeout: Option<Duration>,
    /// Overrides every probe's retry count when set.
    pub probe_retries: Option<u8>,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> PipelineConfig {
        PipelineConfig {
            rgps: RgpsConfig {
                seed,
                ..RgpsConfig::default()
            },
            discovery: DiscoveryConfig {
                seed,
                ..DiscoveryConfig::default()
            },
            loop_plan: LoopProbePlan::default(),
            services: ServiceId::ALL.into_iter().collect(),
            service_options: ServiceScanOptions::default(),
            cve_db: CveDb::shipped(),
            vendor_rules: VendorRules::shipped(),
            profiles: shipped_profiles(),
            known_models: KnownModels::shipped(),
            extra_targets: Vec::new(),
            rate: RateLimit::default(),
            session: (seed as u32) ^ (seed >> 32) as u32,
            probe_timeout: None,
            probe_retries: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub selection: RgpsOutcome,
    pub devices: Vec<PeripheryDevice>,
    pub loops: Vec<LoopEvidence>,
    pub exposures: Vec<ExposureRecord>,
    pub hlev: HlevReport,
    pub reports: Vec<Report>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("prefix selection: {0}")]
    Select(RgpsError),
    #[error("discovery: {0}")]
    Discover(DiscoveryError),
    #[error("services: {0}")]
    Services(ServiceScanError),
    #[error("llm exposure: {0}")]
    Hlev(HlevError),
}

/// Builds the standard reports from stage results.
pub fn build_reports(
    devices: &[PeripheryDevice],
    loops: &[LoopEvidence],
    exposures: &[ExposureRecord],
    scope: &str,
) -> Vec<Report> {
    let mut out = Vec::new();
    let by_rir = aggregate(devices, GroupKey::Rir, PercentDef::OfGlobalTotal).expect("devices group by rir");
    out.push(
        Report::new(
            "Periphery devices by RIR",
            scope,
            GroupKey::Rir,
            PercentDef::OfGlobalTotal,
            by_rir,
        )
        .with_total(),
    );

    let confirmed: BTreeSet<Address> = loops
        .iter()
        .filter(|e| e.verdict == Verdict::Confirmed)
        .map(|e| e.device)
        .collect();
    let flagged: Vec<Flagged> = devices
        .iter()
        .map(|d| Flagged {
            device: d,
            flag: confirmed.contains(&d.address),
        })
        .collect();
    let loop_rows = aggregate(&flagged, GroupKey::Rir, PercentDef::OfGroupTotal).expect("devices group by rir");
    out.push(
        Report::new(
            "Routing loop distribution",
            scope,
            GroupKey::Rir,
            PercentDef::OfGroupTotal,
            loop_rows,
        )
        .with_total(),
    );

    let service_rows = aggregate(exposures, GroupKey::Service, PercentDef::OfGroupTotal).expect("exposures group by service");
    out.push(Report::new(
        "Service exposure",
        scope,
        GroupKey::Service,
        PercentDef::OfGroupTotal,
        service_rows,
    ));

    let mut seen = BTreeSet::new();
    let looping_exposures: Vec<ExposureRecord> = exposures
        .iter()
        .filter(|r| r.responsive && r.vendor.is_some() && confirmed.contains(&r.device))
        .filter(|r| seen.insert(r.device))
        .cloned()
        .collect();
    let vendor_rows =
        aggregate(&looping_exposures, GroupKey::Vendor, PercentDef::OfGlobalTotal).expect("exposures group by vendor");
    out.push(Report::new(
        "Vendors of looping devices",
        scope,
        GroupKey::Vendor,
        PercentDef::OfGlobalTotal,
        vendor_rows,
    ));
    out
}

impl PipelineOutput {
    /// Every stage's records as NDJSON, in a fixed order.
    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let decisions = prefix_decisions(&self.selection);
        out.extend(report::ndjson_lines("prefix", &decisions));
        out.extend(report::ndjson_lines("device", &self.devices));
        out.extend(report::ndjson_lines("loop_evidence", &self.loops));
        out.extend(report::ndjson_lines("exposure", &self.exposures));
        out.extend(report::ndjson_lines("hlev_candidate", &self.hlev.candidates));
        let stats = funnel_records(&self.hlev);
        out.extend(report::ndjson_lines("funnel", &stats));
        for r in &self.reports {
            out.extend(report::render_report(r, report::ReportFormat::Ndjson));
        }
        out
    }
}

/// Selected prefixes first, then rejected candidates in rejection order.
pub fn prefix_decisions(selection: &RgpsOutcome) -> Vec<PrefixDecision> {
    let good = selection.good.iter().map(|p| PrefixDecision {
        prefix: p.clone(),
        meta: p.meta.clone(),
        selected: true,
        reason: None,
    });
    let rejected = selection.rejected.iter().map(|(p, r)| PrefixDecision {
        prefix: p.clone(),
        meta: p.meta.clone(),
        selected: false,
        reason: Some(r.as_str().to_string()),
    });
    good.chain(rejected).collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PrefixDecision {
    pub prefix: Prefix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PrefixMeta>,
    pub selected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl PrefixDecision {
    pub fn into_prefix(self) -> Prefix {
        match self.meta {
            Some(meta) => self.prefix.with_meta(meta),
            None => self.prefix,
        }
    }
}

pub fn funnel_records(report: &HlevReport) -> Vec<ToolStats> {
    report
        .stats
        .iter()
        .map(|(tool, s)| ToolStats {
            tool: tool.name().to_string(),
            stats: *s,
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ToolStats {
    pub tool: String,
    #[serde(flatten)]
    pub stats: crate::hlev::FunnelStats,
}

/// Runs every stage. A stage failure returns the error; earlier stage
/// results are lost only in the sense that callers wanting partial output
/// should drive the stages themselves.
pub fn run_pipeline(pool: &[Prefix], cfg: &PipelineConfig, backend: &mut dyn Backend) -> Result<PipelineOutput, PipelineError> {
    let mut scanner = Scanner::new(backend, cfg.rate, cfg.session).with_timing(cfg.probe_timeout, cfg.probe_retries);

    let selection = select_good_prefixes(pool, &cfg.rgps, &mut scanner).map_err(PipelineError::Select)?;
    let good: Vec<Prefix> = selection.good.iter().cloned().collect();
    log::info!("selected {} of {} prefixes", good.len(), pool.len());

    let discovered = discover(&good, &cfg.discovery, &mut scanner).map_err(PipelineError::Discover)?;
    let mut scope: Vec<Prefix> = pool.to_vec();
    scope.extend(selection.derived.values().flatten().cloned());
    let mut devices = dedupe_devices(selection.responses.iter().chain(&discovered), &scope);
    devices.retain(|d| d.scope.is_some());
    log::info!("{} periphery devices", devices.len());

    let addresses: Vec<Address> = devices.iter().map(|d| d.address).collect();
    let loops = probe_devices(&addresses, &cfg.loop_plan, &mut scanner);

    let mut targets: Vec<Address> = addresses.clone();
    let known: BTreeSet<Address> = addresses.iter().copied().collect();
    let extra: BTreeSet<Address> = cfg.extra_targets.iter().copied().filter(|a| !known.contains(a)).collect();
    targets.extend(extra);
    let mut exposures =
        scan_many(&targets, &cfg.services, &cfg.service_options, &mut scanner).map_err(PipelineError::Services)?;
    annotate(&mut exposures, &cfg.cve_db, &cfg.vendor_rules);

    let hlev = run_hlev(targets.iter().copied(), &cfg.profiles, &cfg.known_models, &mut scanner).map_err(PipelineError::Hlev)?;

    let scope_label = format!("{} selected prefixes, sampled", good.len());
    let reports = build_reports(&devices, &loops, &exposures, &scope_label);
    Ok(PipelineOutput {
        selection,
        devices,
        loops,
        exposures,
        hlev,
        reports,
    })
}

/// Addresses from a list file: one address per line, or NDJSON records with
/// an `address` (devices) or `device` (exposures, loop evidence) field.
/// Blank lines and `#` comments are skipped; duplicates keep the first position.
pub fn read_addresses(text: &str) -> Result<Vec<Address>, crate::prefix::PrefixError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let addr = if line.starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| crate::prefix::PrefixError::InvalidAddress(e.to_string()))?;
            let field = value
                .get("address")
                .or_else(|| value.get("device"))
                .and_then(|v| v.as_str())
                .ok_or_else(|| crate::prefix::PrefixError::InvalidAddress(line.to_string()))?;
            field.parse()?
        } else {
            line.parse()?
        };
        if seen.insert(addr) {
            out.push(addr);
        }
    }
    Ok(out)
}
