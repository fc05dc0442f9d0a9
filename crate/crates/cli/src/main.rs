use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use periscan::engine::{Backend, BackendConfig, BackendRegistry, RateLimit, Scanner, DEFAULT_MAX_PPS, DEFAULT_RETRIES};
use periscan::hlev::{read_signatures, run_hlev, shipped_profiles, HlevError, HlevReport, KnownModels};
use periscan::loops::{probe_devices, LoopEvidence, LoopProbePlan, StrategyRegistry, Verdict};
use periscan::pipeline::{
    build_reports, discover, funnel_records, prefix_decisions, read_addresses, run_pipeline, DiscoveryConfig, DiscoveryError,
    PipelineConfig, PipelineError, PrefixDecision,
};
use periscan::prefix::{
    classify_length, dedupe_pool, read_prefix_file, write_prefix_file, Address, LengthClass, Prefix, PrefixMeta, PrefixRecord,
};
use periscan::report::{
    self, aggregate, dedupe_devices, merge_devices, one_decimal, GroupKey, PercentDef, PeripheryDevice, Report, ReportFormat,
};
use periscan::rgps::{select_good_prefixes, RgpsConfig, RgpsError, RgpsOutcome};
use periscan::services::{
    annotate, scan_many, CveDb, ExposureRecord, ServiceId, ServiceScanError, ServiceScanOptions, VendorRules,
};

const DEFAULT_SERVICE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Parser, Debug)]
#[command(name = "periscan", version, about = "IPv6 network periphery measurement")]
struct Cli {
    /// Transport: the deterministic simulator or raw sockets.
    #[arg(long, global = true, value_enum, default_value_t = BackendKind::Sim)]
    backend: BackendKind,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Maximum packets per second.
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_PPS)]
    rate: u32,

    /// Output file instead of stdout. NDJSON records are appended; CSV and
    /// table output replaces the file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Topology file for the sim backend.
    #[arg(long, global = true)]
    topology: Option<PathBuf>,

    /// Source address for the live backend.
    #[arg(long, global = true)]
    source: Option<String>,

    /// Per-probe timeout for every stage, e.g. `2s` or `500ms`.
    #[arg(long, global = true, value_parser = duration_arg)]
    timeout: Option<Duration>,

    /// Retransmissions per probe for every stage.
    #[arg(long, global = true)]
    retries: Option<u8>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Live,
    Sim,
}

impl BackendKind {
    fn name(self) -> &'static str {
        match self {
            BackendKind::Live => "live",
            BackendKind::Sim => "sim",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, deduplicate and classify an announced-prefix list.
    Ingest {
        /// CSV lines: prefix,asn,isp,region,rir
        pool: PathBuf,
    },
    /// Response-guided prefix selection.
    Select(SelectArgs),
    /// Device discovery over selected prefixes.
    Scan(ScanArgs),
    /// Routing loop detection for discovered devices.
    Loops(LoopArgs),
    /// Service exposure, version extraction, CVE and vendor mapping.
    Services(ServiceArgs),
    /// LLM deployment exposure verification.
    Hlev(HlevArgs),
    /// Aggregate stage records into tables.
    Report(ReportArgs),
    /// Every stage in order on one backend.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Prefix list (CSV) or ingest output (NDJSON).
    #[arg(long)]
    pool: PathBuf,
    /// Silence threshold, e.g. `120s` or `2m`; bare numbers are seconds.
    #[arg(long, default_value = "120s", value_parser = duration_arg)]
    tau: Duration,
    #[arg(long, default_value_t = periscan::rgps::DEFAULT_CHILD_LEN)]
    child_len: u8,
    /// Probes per candidate.
    #[arg(long, default_value_t = periscan::rgps::DEFAULT_SCAN_BUDGET)]
    budget: u64,
    /// Probes for the exploratory scan of a short prefix.
    #[arg(long, default_value_t = periscan::rgps::DEFAULT_EXPLORATORY_BUDGET)]
    exploratory_budget: u64,
    /// `csv` writes the prefix file format with a reason column for
    /// rejections; `ndjson` writes prefix records.
    #[arg(long, value_enum, default_value_t = SelectFormat::Csv)]
    format: SelectFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectFormat {
    Csv,
    Ndjson,
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// Selected prefixes: select output, ingest output or a prefix CSV.
    #[arg(long)]
    pool: PathBuf,
    /// Number of sampled /64s over all prefixes.
    #[arg(long, default_value_t = periscan::pipeline::DEFAULT_DISCOVERY_BUDGET)]
    budget: u64,
    #[arg(long, default_value_t = 1)]
    shards: usize,
    /// Which shard this process runs, from 0.
    #[arg(long, default_value_t = 0)]
    shard: usize,
    #[arg(long, default_value_t = 64)]
    hop_limit: u8,
}

#[derive(Args, Debug)]
struct LoopArgs {
    /// Device list: addresses, or NDJSON device records.
    #[arg(long, visible_alias = "targets")]
    devices: PathBuf,
    /// Initial hop limit.
    #[arg(long, default_value_t = periscan::loops::DEFAULT_HOP_LIMIT)]
    hop: u8,
    /// Hop limit increment for the second probe.
    #[arg(long, default_value_t = periscan::loops::DEFAULT_INCREMENT)]
    inc: u8,
    #[arg(long, default_value_t = periscan::loops::DEFAULT_TRIALS)]
    trials: u32,
    /// Target selection strategy.
    #[arg(long, default_value = "own-slash64")]
    strategy: String,
}

#[derive(Args, Debug)]
struct ServiceOpts {
    /// Comma-separated services; default all eight.
    #[arg(long, value_delimiter = ',')]
    services: Vec<String>,
    #[arg(long)]
    cve_db: Option<PathBuf>,
    #[arg(long)]
    vendor_rules: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServiceArgs {
    /// Device list: addresses, or NDJSON device records.
    #[arg(long, visible_alias = "targets")]
    devices: PathBuf,
    #[command(flatten)]
    opts: ServiceOpts,
}

#[derive(Args, Debug)]
struct HlevOpts {
    /// Signature table (CSV); default the shipped one.
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// Known model names, one per line.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HlevArgs {
    /// Previously discovered devices: addresses, or NDJSON device records.
    #[arg(long, visible_alias = "devices")]
    targets: PathBuf,
    #[command(flatten)]
    opts: HlevOpts,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// NDJSON with device records.
    #[arg(long)]
    devices: PathBuf,
    /// NDJSON with loop evidence records.
    #[arg(long)]
    loops: Option<PathBuf>,
    /// NDJSON with exposure records.
    #[arg(long)]
    exposures: Option<PathBuf>,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    /// One custom table instead of the standard set.
    #[arg(long)]
    group_by: Option<GroupKey>,
    #[arg(long, value_enum, default_value_t = PercentArg::Global)]
    percent: PercentArg,
    /// Label describing what was scanned.
    #[arg(long, default_value = "scanned prefixes (representative per block)")]
    scope: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PercentArg {
    Group,
    Global,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    pool: PathBuf,
    /// Extra addresses for the service and LLM stages.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long, default_value = "120s", value_parser = duration_arg)]
    tau: Duration,
    #[arg(long, default_value_t = periscan::rgps::DEFAULT_CHILD_LEN)]
    child_len: u8,
    #[arg(long, default_value_t = periscan::rgps::DEFAULT_SCAN_BUDGET)]
    budget: u64,
    #[arg(long, default_value_t = periscan::pipeline::DEFAULT_DISCOVERY_BUDGET)]
    discovery_budget: u64,
    #[arg(long, default_value_t = periscan::loops::DEFAULT_HOP_LIMIT)]
    hop: u8,
    #[arg(long, default_value_t = periscan::loops::DEFAULT_INCREMENT)]
    inc: u8,
    #[arg(long, default_value_t = periscan::loops::DEFAULT_TRIALS)]
    trials: u32,
    #[command(flatten)]
    services: ServiceOpts,
    #[command(flatten)]
    hlev: HlevOpts,
}

/// How a command ended when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Complete,
    Partial,
}

/// Bad input, unreadable files, an unusable backend.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for ConfigError {
    fn from(e: E) -> Self {
        ConfigError(e.into())
    }
}

type CmdResult = Result<Outcome, ConfigError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match dispatch(&cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(ConfigError(e)) => {
            eprintln!("periscan: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let out = Output::new(cli.out.as_deref());
    match &cli.command {
        Command::Ingest { pool } => ingest(pool, &out),
        Command::Select(args) => select(cli, args, &out),
        Command::Scan(args) => scan(cli, args, &out),
        Command::Loops(args) => loops(cli, args, &out),
        Command::Services(args) => services(cli, args, &out),
        Command::Hlev(args) => hlev(cli, args, &out),
        Command::Report(args) => report_cmd(args, &out),
        Command::Run(args) => run(cli, args, &out),
    }
}

/// Where records go: appended under a lock to `--out`, or stdout.
struct Output<'a> {
    path: Option<&'a Path>,
}

impl<'a> Output<'a> {
    fn new(path: Option<&'a Path>) -> Self {
        Output { path }
    }

    fn records<T: Serialize>(&self, kind: &str, records: &[T]) -> Result<(), ConfigError> {
        match self.path {
            Some(p) => report::append_ndjson(p, kind, records).with_context(|| format!("writing {}", p.display()))?,
            None => io::stdout().lock().write_all(&report::ndjson_lines(kind, records))?,
        }
        Ok(())
    }

    fn append(&self, bytes: &[u8]) -> Result<(), ConfigError> {
        match self.path {
            Some(p) => {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .with_context(|| format!("writing {}", p.display()))?;
                f.lock()?;
                f.write_all(bytes)?;
            }
            None => io::stdout().lock().write_all(bytes)?,
        }
        Ok(())
    }

    fn bytes(&self, bytes: &[u8]) -> Result<(), ConfigError> {
        match self.path {
            Some(p) => {
                let mut f: File = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(p)
                    .with_context(|| format!("writing {}", p.display()))?;
                f.write_all(bytes)?;
            }
            None => io::stdout().lock().write_all(bytes)?,
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    prefix: Prefix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<PrefixMeta>,
    class: String,
}

fn class_name(class: LengthClass) -> &'static str {
    match class {
        LengthClass::InRange => "in_range",
        LengthClass::TooShort => "too_short",
        LengthClass::TooLong => "too_long",
    }
}

/// Prefixes from a CSV prefix list, ingest output, or select output in
/// either format (only the selected ones).
fn load_pool(path: &Path) -> anyhow::Result<Vec<Prefix>> {
    let text = read_text(path)?;
    let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
    if !first.is_some_and(|l| l.starts_with('{')) {
        let records = read_prefix_file(text.as_bytes()).with_context(|| format!("parsing {}", path.display()))?;
        let kept: Vec<Prefix> = records
            .into_iter()
            .filter(|r| r.reason.as_deref().is_none_or(str::is_empty))
            .map(|r| r.prefix)
            .collect();
        if kept.is_empty() {
            bail!("{} has no usable prefixes", path.display());
        }
        return Ok(dedupe_pool(kept));
    }
    let entries: Vec<PoolEntry> = report::read_ndjson(&text, "pool")?;
    let mut pool: Vec<Prefix> = entries
        .into_iter()
        .map(|e| match e.meta {
            Some(m) => e.prefix.with_meta(m),
            None => e.prefix,
        })
        .collect();
    let decisions: Vec<PrefixDecision> = report::read_ndjson(&text, "prefix")?;
    pool.extend(decisions.into_iter().filter(|d| d.selected).map(PrefixDecision::into_prefix));
    if pool.is_empty() {
        bail!("{} has no pool or selected prefix records", path.display());
    }
    Ok(dedupe_pool(pool))
}

fn load_targets(path: &Path) -> anyhow::Result<Vec<Address>> {
    read_addresses(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn open_backend(cli: &Cli) -> anyhow::Result<Box<dyn Backend>> {
    let mut config = BackendConfig::new(cli.seed);
    match cli.backend {
        BackendKind::Sim => {
            let topology = cli
                .topology
                .as_ref()
                .ok_or_else(|| anyhow!("--backend sim needs --topology <file>"))?;
            config = config.with("topology", topology.display().to_string());
        }
        BackendKind::Live => {
            let source = cli
                .source
                .as_ref()
                .ok_or_else(|| anyhow!("--backend live needs --source <ipv6 address>"))?;
            config = config.with("source", source.clone());
        }
    }
    Ok(BackendRegistry::with_defaults().open(cli.backend.name(), &config)?)
}

fn rate(cli: &Cli) -> anyhow::Result<RateLimit> {
    RateLimit::new(cli.rate).map_err(|e| anyhow!("--rate: {e}"))
}

fn session(seed: u64) -> u32 {
    (seed as u32) ^ (seed >> 32) as u32
}

fn duration_arg(text: &str) -> Result<Duration, String> {
    match text.parse::<f64>() {
        Ok(secs) => Duration::try_from_secs_f64(secs).map_err(|_| format!("{text:?} is not a non-negative duration")),
        Err(_) => humantime::parse_duration(text).map_err(|e| format!("{text:?}: {e}")),
    }
}

fn scanner<'b>(cli: &Cli, backend: &'b mut dyn Backend) -> anyhow::Result<Scanner<'b>> {
    Ok(Scanner::new(backend, rate(cli)?, session(cli.seed)).with_timing(cli.timeout, cli.retries))
}

fn ingest(pool: &Path, out: &Output) -> CmdResult {
    let text = read_text(pool)?;
    let records = read_prefix_file(text.as_bytes()).with_context(|| format!("parsing {}", pool.display()))?;
    let total = records.len();
    let prefixes = dedupe_pool(records.into_iter().map(|r| r.prefix).collect());
    let entries: Vec<PoolEntry> = prefixes
        .into_iter()
        .map(|p| PoolEntry {
            class: class_name(classify_length(&p)).to_string(),
            meta: p.meta.clone(),
            prefix: p,
        })
        .collect();
    for class in ["in_range", "too_short", "too_long"] {
        info!("{class}: {}", entries.iter().filter(|e| e.class == class).count());
    }
    info!("{} prefixes read, {} after deduplication", total, entries.len());
    out.records("pool", &entries)?;
    Ok(Outcome::Complete)
}

fn rgps_config(seed: u64, tau: Duration, child_len: u8, budget: u64) -> anyhow::Result<RgpsConfig> {
    let cfg = RgpsConfig {
        tau,
        child_len,
        scan_budget: budget,
        seed,
        ..RgpsConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn select(cli: &Cli, args: &SelectArgs, out: &Output) -> CmdResult {
    let pool = load_pool(&args.pool)?;
    let mut cfg = rgps_config(cli.seed, args.tau, args.child_len, args.budget)?;
    cfg.exploratory_budget = args.exploratory_budget;
    cfg.validate()?;
    let mut backend = open_backend(cli)?;
    let mut scanner = scanner(cli, backend.as_mut())?;
    match select_good_prefixes(&pool, &cfg, &mut scanner) {
        Ok(outcome) => {
            write_selection(&outcome, args.format, out)?;
            Ok(Outcome::Complete)
        }
        Err(RgpsError::Scan { prefix, source, partial }) => {
            warn!("scan of {prefix} failed: {source}");
            write_selection(&partial, args.format, out)?;
            Ok(Outcome::Partial)
        }
        Err(e) => Err(e.into()),
    }
}

fn write_selection(outcome: &RgpsOutcome, format: SelectFormat, out: &Output) -> Result<(), ConfigError> {
    let decisions = prefix_decisions(outcome);
    match format {
        SelectFormat::Ndjson => out.records("prefix", &decisions),
        SelectFormat::Csv => {
            let records: Vec<PrefixRecord> = decisions
                .into_iter()
                .map(|d| PrefixRecord {
                    reason: d.reason.clone(),
                    prefix: d.into_prefix(),
                })
                .collect();
            let mut bytes = Vec::new();
            write_prefix_file(&mut bytes, &records)?;
            out.bytes(&bytes)
        }
    }
}

fn scan(cli: &Cli, args: &ScanArgs, out: &Output) -> CmdResult {
    let pool = load_pool(&args.pool)?;
    if args.shards == 0 || args.shard >= args.shards {
        return Err(anyhow!("--shard must be below --shards").into());
    }
    let cfg = DiscoveryConfig {
        budget: args.budget,
        seed: cli.seed,
        shard: (args.shard, args.shards),
        hop_limit: args.hop_limit,
        ..DiscoveryConfig::default()
    };
    let mut backend = open_backend(cli)?;
    let mut scanner = scanner(cli, backend.as_mut())?;
    let (responses, outcome) = match discover(&pool, &cfg, &mut scanner) {
        Ok(r) => (r, Outcome::Complete),
        Err(DiscoveryError::Scan { source, partial }) => {
            warn!("discovery scan failed: {source}");
            (partial, Outcome::Partial)
        }
        Err(e) => return Err(e.into()),
    };
    let mut devices = dedupe_devices(&responses, &pool);
    devices.retain(|d| d.scope.is_some());
    info!("{} devices from {} responses", devices.len(), responses.len());
    out.records("device", &devices)?;
    Ok(outcome)
}

fn loop_plan(hop: u8, inc: u8, trials: u32, strategy: &str) -> anyhow::Result<LoopProbePlan> {
    let registry = StrategyRegistry::with_defaults();
    let strategy = registry
        .get(strategy)
        .ok_or_else(|| anyhow!("unknown strategy {strategy:?} (available: {})", registry.names().join(", ")))?;
    Ok(LoopProbePlan::new(hop, inc, trials)?.with_strategy(strategy))
}

fn loops(cli: &Cli, args: &LoopArgs, out: &Output) -> CmdResult {
    let targets = load_targets(&args.devices)?;
    let plan = loop_plan(args.hop, args.inc, args.trials, &args.strategy)?;
    let mut backend = open_backend(cli)?;
    let mut scanner = scanner(cli, backend.as_mut())?;
    let evidence: Vec<LoopEvidence> = probe_devices(&targets, &plan, &mut scanner);
    let confirmed = evidence.iter().filter(|e| e.verdict == Verdict::Confirmed).count();
    info!("{confirmed} of {} devices loop", evidence.len());
    out.records("loop_evidence", &evidence)?;
    Ok(if evidence.iter().any(|e| e.error.is_some()) {
        Outcome::Partial
    } else {
        Outcome::Complete
    })
}

struct ServiceSetup {
    services: BTreeSet<ServiceId>,
    options: ServiceScanOptions,
    cve_db: CveDb,
    vendor_rules: VendorRules,
}

fn service_setup(cli: &Cli, opts: &ServiceOpts) -> anyhow::Result<ServiceSetup> {
    let services = if opts.services.is_empty() {
        ServiceId::ALL.into_iter().collect()
    } else {
        opts.services.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    let cve_db = match &opts.cve_db {
        Some(p) => CveDb::read(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => CveDb::shipped(),
    };
    let vendor_rules = match &opts.vendor_rules {
        Some(p) => VendorRules::read(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => VendorRules::shipped(),
    };
    Ok(ServiceSetup {
        services,
        options: ServiceScanOptions {
            timeout: cli.timeout.unwrap_or(DEFAULT_SERVICE_TIMEOUT),
            retries: cli.retries.unwrap_or(DEFAULT_RETRIES),
            ..ServiceScanOptions::default()
        },
        cve_db,
        vendor_rules,
    })
}

fn services(cli: &Cli, args: &ServiceArgs, out: &Output) -> CmdResult {
    let targets = load_targets(&args.devices)?;
    let setup = service_setup(cli, &args.opts)?;
    let mut backend = open_backend(cli)?;
    let mut scanner = scanner(cli, backend.as_mut())?;
    let (mut records, outcome) = match scan_many(&targets, &setup.services, &setup.options, &mut scanner) {
        Ok(r) => (r, Outcome::Complete),
        Err(ServiceScanError { source, partial }) => {
            warn!("service scan failed: {source}");
            (partial, Outcome::Partial)
        }
    };
    annotate(&mut records, &setup.cve_db, &setup.vendor_rules);
    out.records("exposure", &records)?;
    Ok(outcome)
}

fn hlev_setup(opts: &HlevOpts) -> anyhow::Result<(Vec<periscan::hlev::ToolProfile>, KnownModels)> {
    let profiles = match &opts.signatures {
        Some(p) => read_signatures(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => shipped_profiles(),
    };
    let known = match &opts.models {
        Some(p) => KnownModels::parse(&read_text(p)?),
        None => KnownModels::shipped(),
    };
    Ok((profiles, known))
}

fn write_hlev(report: &HlevReport, out: &Output) -> Result<(), ConfigError> {
    out.records("hlev_candidate", &report.candidates)?;
    out.records("funnel", &funnel_records(report))
}

fn hlev(cli: &Cli, args: &HlevArgs, out: &Output) -> CmdResult {
    let targets = load_targets(&args.targets)?;
    let (profiles, known) = hlev_setup(&args.opts)?;
    let mut backend = open_backend(cli)?;
    let mut scanner = scanner(cli, backend.as_mut())?;
    match run_hlev(targets, &profiles, &known, &mut scanner) {
        Ok(report) => {
            info!("{} exposed deployments", report.exposed.len());
            write_hlev(&report, out)?;
            Ok(Outcome::Complete)
        }
        Err(HlevError::Scan { source, partial }) => {
            warn!("llm exposure scan failed: {source}");
            write_hlev(&partial, out)?;
            Ok(Outcome::Partial)
        }
    }
}

fn report_cmd(args: &ReportArgs, out: &Output) -> CmdResult {
    let devices: Vec<PeripheryDevice> = merge_devices(report::read_ndjson(&read_text(&args.devices)?, "device")?);
    let loops: Vec<LoopEvidence> = match &args.loops {
        Some(p) => report::read_ndjson(&read_text(p)?, "loop_evidence")?,
        None => Vec::new(),
    };
    let exposures: Vec<ExposureRecord> = match &args.exposures {
        Some(p) => report::read_ndjson(&read_text(p)?, "exposure")?,
        None => Vec::new(),
    };

    let reports = match args.group_by {
        None => build_reports(&devices, &loops, &exposures, &args.scope),
        Some(key) => {
            let def = match args.percent {
                PercentArg::Group => PercentDef::OfGroupTotal,
                PercentArg::Global => PercentDef::OfGlobalTotal,
            };
            let rows = match key {
                GroupKey::Service | GroupKey::Vendor => aggregate(&exposures, key, def)?,
                _ => aggregate(&devices, key, def)?,
            };
            let title = format!("Grouped by {}", key.name());
            vec![Report::new(&title, &args.scope, key, def, rows).with_total()]
        }
    };

    let mut bytes = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        if i > 0 && args.format == ReportFormat::PlainTable {
            bytes.push(b'\n');
        }
        bytes.extend(report::render_report(r, args.format));
    }
    if args.format == ReportFormat::PlainTable {
        let (distinct, _) = report::slash64_share(&devices);
        let share = one_decimal(distinct, devices.len() as u64);
        bytes.extend(format!("\n{} devices in {} distinct /64s ({share}%)\n", devices.len(), distinct).as_bytes());
    }
    out.bytes(&bytes)?;
    Ok(Outcome::Complete)
}

fn run(cli: &Cli, args: &RunArgs, out: &Output) -> CmdResult {
    let pool = load_pool(&args.pool)?;
    let mut cfg = PipelineConfig::with_seed(cli.seed);
    cfg.rgps = rgps_config(cli.seed, args.tau, args.child_len, args.budget)?;
    cfg.discovery.budget = args.discovery_budget;
    cfg.loop_plan = loop_plan(args.hop, args.inc, args.trials, "own-slash64")?;
    let setup = service_setup(cli, &args.services)?;
    cfg.services = setup.services;
    cfg.service_options = setup.options;
    cfg.cve_db = setup.cve_db;
    cfg.vendor_rules = setup.vendor_rules;
    (cfg.profiles, cfg.known_models) = hlev_setup(&args.hlev)?;
    if let Some(t) = &args.targets {
        cfg.extra_targets = load_targets(t)?;
    }
    cfg.rate = rate(cli)?;
    cfg.probe_timeout = cli.timeout;
    cfg.probe_retries = cli.retries;

    let mut backend = open_backend(cli)?;
    match run_pipeline(&pool, &cfg, backend.as_mut()) {
        Ok(output) => {
            out.append(&output.to_ndjson())?;
            Ok(Outcome::Complete)
        }
        Err(PipelineError::Select(e @ (RgpsError::EmptyPool | RgpsError::Config(_) | RgpsError::Targets { .. }))) => {
            Err(e.into())
        }
        Err(e) => {
            warn!("{e}");
            Ok(Outcome::Partial)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn pool_from_csv_and_ndjson() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(
            dir.path(),
            "p.csv",
            "# pool\n2001:db8::/32,64500,Acme,JP,APNIC\n2001:db8::/32,64500,Acme,JP,APNIC\n",
        );
        let pool = load_pool(&csv).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool[0].meta.as_ref().unwrap().asn, Some(64500));

        let decisions = concat!(
            r#"{"schema":"periscan/1","record":"prefix","prefix":"2001:db8::/32","meta":{"isp":"Acme","region":"JP","rir":"APNIC"},"selected":true}"#,
            "\n",
            r#"{"schema":"periscan/1","record":"prefix","prefix":"2001:db9::/52","selected":false,"reason":"too_long"}"#,
            "\n"
        );
        let pool = load_pool(&write(dir.path(), "s.ndjson", decisions)).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool[0].meta.as_ref().unwrap().isp, "Acme");

        let empty = write(
            dir.path(),
            "e.ndjson",
            r#"{"schema":"periscan/1","record":"device","address":"2001:db8::1"}"#,
        );
        assert!(load_pool(&empty).is_err());
    }

    #[test]
    fn durations_accept_units_or_bare_seconds() {
        assert_eq!(duration_arg("120s").unwrap(), Duration::from_secs(120));
        assert_eq!(duration_arg("2m").unwrap(), Duration::from_secs(120));
        assert_eq!(duration_arg("1.5").unwrap(), Duration::from_millis(1500));
        assert_eq!(duration_arg("250ms").unwrap(), Duration::from_millis(250));
        assert!(duration_arg("-1").is_err());
        assert!(duration_arg("NaN").is_err());
        assert!(duration_arg("soon").is_err());
    }

    #[test]
    fn cli_shape_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
