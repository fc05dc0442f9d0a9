//! Device deduplication, grouped percentages and report rendering.
//!
//! Percentages are exact rational values rounded half-up, so a count of
//! 4,510,000 over 281,920,000 renders as 1.60 on every platform.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ProbeResponse;
use crate::prefix::{slash64_of, Address, Prefix, PrefixMeta};
use crate::services::ExposureRecord;

pub const SCHEMA: &str = "periscan/1";

/// A responsive last-hop address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeripheryDevice {
    pub address: Address,
    pub slash64: Prefix,
    /// Scan-clock milliseconds of the earliest response.
    pub first_seen_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<PrefixMeta>,
    /// The scanned prefix the device was found under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Prefix>,
}

fn millis(d: Duration) -> u64 {
    u64::try_from(d.as_millis()).unwrap_or(u64::MAX)
}

/// One device per distinct responding source, ascending by address.
///
/// Each device takes the metadata of the longest prefix in `scope` that
/// covers it. Timeout records are ignored.
pub fn dedupe_devices<'a, I>(responses: I, scope: &[Prefix]) -> Vec<PeripheryDevice>
where
    I: IntoIterator<Item = &'a ProbeResponse>,
{
    let mut first: BTreeMap<Address, Duration> = BTreeMap::new();
    for r in responses {
        if r.payload.is_timeout() {
            continue;
        }
        first.entry(r.source).and_modify(|t| *t = (*t).min(r.at)).or_insert(r.at);
    }
    first
        .into_iter()
        .map(|(address, at)| {
            let covering = scope.iter().filter(|p| p.contains(address)).max_by_key(|p| p.len());
            PeripheryDevice {
                address,
                slash64: slash64_of(address),
                first_seen_ms: millis(at),
                provenance: covering.and_then(|p| p.meta.clone()),
                scope: covering.map(|p| Prefix::new(p.network(), p.len())),
            }
        })
        .collect()
}

/// Merges device lists, keeping the earliest sighting of each address.
pub fn merge_devices<I: IntoIterator<Item = PeripheryDevice>>(devices: I) -> Vec<PeripheryDevice> {
    let mut by_addr: BTreeMap<Address, PeripheryDevice> = BTreeMap::new();
    for d in devices {
        match by_addr.get_mut(&d.address) {
            Some(kept) if kept.first_seen_ms <= d.first_seen_ms => {}
            Some(kept) => *kept = d,
            None => {
                by_addr.insert(d.address, d);
            }
        }
    }
    by_addr.into_values().collect()
}

/// Percentage with two decimals, stored as hundredths of a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Percent(pub u64);

impl Percent {
    /// `100 * count / denominator` rounded half-up to hundredths; zero for an empty denominator.
    pub fn of(count: u64, denominator: u64) -> Percent {
        Percent(round_half_up(u128::from(count) * 10_000, u128::from(denominator)))
    }

    /// Tenths of a percent, rounded half-up from the exact ratio.
    pub fn tenths_of(count: u64, denominator: u64) -> u64 {
        round_half_up(u128::from(count) * 1_000, u128::from(denominator))
    }

    pub fn hundredths(self) -> u64 {
        self.0
    }
}

fn round_half_up(numerator: u128, denominator: u128) -> u64 {
    if denominator == 0 {
        return 0;
    }
    u64::try_from((2 * numerator + denominator) / (2 * denominator)).unwrap_or(u64::MAX)
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (whole, frac) = s.split_once('.').unwrap_or((&s, "0"));
        let frac = format!("{frac:0<2}");
        let parse = |t: &str| t.parse::<u64>().map_err(serde::de::Error::custom);
        if frac.len() != 2 {
            return Err(serde::de::Error::custom(format!("percent {s:?} has more than two decimals")));
        }
        Ok(Percent(parse(whole)? * 100 + parse(&frac)?))
    }
}

/// `count / denominator` as a percentage with one decimal, e.g. `99.3`.
pub fn one_decimal(count: u64, denominator: u64) -> String {
    let t = Percent::tenths_of(count, denominator);
    format!("{}.{}", t / 10, t % 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Rir,
    Region,
    Asn,
    Isp,
    Service,
    Vendor,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Rir => "rir",
            GroupKey::Region => "region",
            GroupKey::Asn => "asn",
            GroupKey::Isp => "isp",
            GroupKey::Service => "service",
            GroupKey::Vendor => "vendor",
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("unknown group key {0:?}")]
    UnknownKey(String),
    #[error("{record} records cannot be grouped by {key}")]
    Unsupported { key: GroupKey, record: &'static str },
}

impl FromStr for GroupKey {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            GroupKey::Rir,
            GroupKey::Region,
            GroupKey::Asn,
            GroupKey::Isp,
            GroupKey::Service,
            GroupKey::Vendor,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| AggregateError::UnknownKey(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentDef {
    /// Hits in a group over the group's size.
    OfGroupTotal,
    /// Hits in a group over the size of all groups together.
    OfGlobalTotal,
}

pub const UNKNOWN_GROUP: &str = "unknown";

/// Something that can be counted into groups. `weight` is its contribution
/// to a group's size and `hits` to the counted numerator.
pub trait Countable {
    const KIND: &'static str;

    fn group(&self, key: GroupKey) -> Result<String, AggregateError>;

    fn hits(&self) -> u64;

    fn weight(&self) -> u64 {
        1
    }
}

fn meta_group(meta: Option<&PrefixMeta>, key: GroupKey, kind: &'static str) -> Result<String, AggregateError> {
    let text = |s: &str| {
        if s.is_empty() {
            UNKNOWN_GROUP.to_string()
        } else {
            s.to_string()
        }
    };
    Ok(match key {
        GroupKey::Rir => meta
            .and_then(|m| m.rir.as_ref())
            .map_or(UNKNOWN_GROUP.to_string(), |r| r.group_label().to_string()),
        GroupKey::Region => text(meta.map_or("", |m| m.region.as_str())),
        GroupKey::Isp => text(meta.map_or("", |m| m.isp.as_str())),
        GroupKey::Asn => meta
            .and_then(|m| m.asn)
            .map_or(UNKNOWN_GROUP.to_string(), |a| format!("AS{a}")),
        GroupKey::Service | GroupKey::Vendor => return Err(AggregateError::Unsupported { key, record: kind }),
    })
}

impl Countable for PeripheryDevice {
    const KIND: &'static str = "device";

    fn group(&self, key: GroupKey) -> Result<String, AggregateError> {
        meta_group(self.provenance.as_ref(), key, Self::KIND)
    }

    fn hits(&self) -> u64 {
        1
    }
}

/// A device paired with a yes/no finding, such as a confirmed loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flagged<'a> {
    pub device: &'a PeripheryDevice,
    pub flag: bool,
}

impl Countable for Flagged<'_> {
    const KIND: &'static str = "flagged device";

    fn group(&self, key: GroupKey) -> Result<String, AggregateError> {
        meta_group(self.device.provenance.as_ref(), key, Self::KIND)
    }

    fn hits(&self) -> u64 {
        u64::from(self.flag)
    }
}

impl Countable for ExposureRecord {
    const KIND: &'static str = "exposure";

    fn group(&self, key: GroupKey) -> Result<String, AggregateError> {
        match key {
            GroupKey::Service => Ok(self.service.name().to_string()),
            GroupKey::Vendor => Ok(self.vendor.clone().unwrap_or_else(|| UNKNOWN_GROUP.to_string())),
            _ => Err(AggregateError::Unsupported { key, record: Self::KIND }),
        }
    }

    fn hits(&self) -> u64 {
        u64::from(self.responsive)
    }
}

/// Pre-counted input: `hits` of `weight` in group `key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub key: String,
    pub hits: u64,
    pub weight: u64,
}

impl Tally {
    pub fn new(key: &str, hits: u64, weight: u64) -> Tally {
        Tally {
            key: key.to_string(),
            hits,
            weight,
        }
    }
}

impl Countable for Tally {
    const KIND: &'static str = "tally";

    fn group(&self, _key: GroupKey) -> Result<String, AggregateError> {
        Ok(self.key.clone())
    }

    fn hits(&self) -> u64 {
        self.hits
    }

    fn weight(&self) -> u64 {
        self.weight
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group_by: GroupKey,
    pub key: String,
    pub count: u64,
    pub denominator: u64,
    pub percent: Percent,
}

impl AggregateRow {
    pub fn new(group_by: GroupKey, key: &str, count: u64, denominator: u64) -> AggregateRow {
        AggregateRow {
            group_by,
            key: key.to_string(),
            count,
            denominator,
            percent: Percent::of(count, denominator),
        }
    }
}

/// Grouped counts with percentages, largest count first (ties by key).
pub fn aggregate<R: Countable>(records: &[R], group_by: GroupKey, def: PercentDef) -> Result<Vec<AggregateRow>, AggregateError> {
    let mut groups: HashMap<String, (u64, u64)> = HashMap::new();
    let mut global = 0u64;
    for r in records {
        let g = groups.entry(r.group(group_by)?).or_default();
        g.0 += r.hits();
        g.1 += r.weight();
        global += r.weight();
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|(key, (hits, weight))| {
            let denominator = match def {
                PercentDef::OfGroupTotal => weight,
                PercentDef::OfGlobalTotal => global,
            };
            AggregateRow::new(group_by, &key, hits, denominator)
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
    Ok(rows)
}

/// The row summarising `rows`: total count over the largest shared
/// denominator for global percentages, or over the summed group sizes.
pub fn total_row(rows: &[AggregateRow], group_by: GroupKey, def: PercentDef) -> AggregateRow {
    let count = rows.iter().map(|r| r.count).sum();
    let denominator = match def {
        PercentDef::OfGroupTotal => rows.iter().map(|r| r.denominator).sum(),
        PercentDef::OfGlobalTotal => rows.iter().map(|r| r.denominator).max().unwrap_or(0),
    };
    AggregateRow::new(group_by, "Total", count, denominator)
}

/// Distinct /64 prefixes among `devices` and their share of the device count, in tenths of a percent.
pub fn slash64_share(devices: &[PeripheryDevice]) -> (u64, u64) {
    let distinct: std::collections::BTreeSet<&Prefix> = devices.iter().map(|d| &d.slash64).collect();
    let n = distinct.len() as u64;
    (n, Percent::tenths_of(n, devices.len() as u64))
}

/// `281.92M`, `87.40k` or the plain integer below one thousand.
pub fn humanize(n: u64) -> String {
    let scaled = |unit: u64, suffix: &str| {
        let h = round_half_up(u128::from(n) * 100, u128::from(unit));
        format!("{}.{:02}{suffix}", h / 100, h % 100)
    };
    if n >= 1_000_000 {
        scaled(1_000_000, "M")
    } else if n >= 1_000 {
        scaled(1_000, "k")
    } else {
        n.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    PlainTable,
    Csv,
    Ndjson,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" | "plain" | "plain_table" => Ok(ReportFormat::PlainTable),
            "csv" => Ok(ReportFormat::Csv),
            "ndjson" | "jsonl" => Ok(ReportFormat::Ndjson),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Rows plus the context needed to read them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    /// What was scanned, for example `3 prefixes (representative per block)`.
    pub scope: String,
    pub group_by: GroupKey,
    pub percent_def: PercentDef,
    pub rows: Vec<AggregateRow>,
    pub total: Option<AggregateRow>,
}

impl Report {
    pub fn new(title: &str, scope: &str, group_by: GroupKey, percent_def: PercentDef, rows: Vec<AggregateRow>) -> Report {
        Report {
            title: title.to_string(),
            scope: scope.to_string(),
            group_by,
            percent_def,
            rows,
            total: None,
        }
    }

    pub fn with_total(mut self) -> Report {
        self.total = Some(total_row(&self.rows, self.group_by, self.percent_def));
        self
    }
}

pub fn render_report(report: &Report, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::PlainTable => render_table(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Ndjson => {
            let mut out = Vec::new();
            for row in report.rows.iter().chain(&report.total) {
                let line = Envelope {
                    schema: SCHEMA,
                    record: "aggregate",
                    body: ReportLine {
                        title: &report.title,
                        scope: &report.scope,
                        percent_def: report.percent_def,
                        row,
                    },
                };
                serde_json::to_writer(&mut out, &line).expect("rows serialize");
                out.push(b'\n');
            }
            out
        }
    }
}

#[derive(Serialize)]
struct ReportLine<'a> {
    title: &'a str,
    scope: &'a str,
    percent_def: PercentDef,
    #[serde(flatten)]
    row: &'a AggregateRow,
}

fn render_table(report: &Report) -> Vec<u8> {
    let header = [report.group_by.name().to_uppercase(), "#".into(), "TOTAL".into(), "%".into()];
    let mut lines: Vec<[String; 4]> = vec![header];
    for row in report.rows.iter().chain(&report.total) {
        lines.push([
            row.key.clone(),
            humanize(row.count),
            humanize(row.denominator),
            format!("{}%", row.percent),
        ]);
    }
    let mut widths = [0usize; 4];
    for l in &lines {
        for (w, cell) in widths.iter_mut().zip(l) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = format!("{}\nscope: {}\n", report.title, report.scope);
    let rule = format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 6));
    let total_at = 1 + report.rows.len();
    for (i, l) in lines.iter().enumerate() {
        if i == 1 || (report.total.is_some() && i == total_at) {
            out.push_str(&rule);
        }
        let pad = |s: &str, w: usize| " ".repeat(w - s.chars().count());
        out.push_str(&format!(
            "{}{}  {}{}  {}{}  {}{}\n",
            l[0],
            pad(&l[0], widths[0]),
            pad(&l[1], widths[1]),
            l[1],
            pad(&l[2], widths[2]),
            l[2],
            pad(&l[3], widths[3]),
            l[3]
        ));
    }
    out.into_bytes()
}

fn render_csv(report: &Report) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record([report.group_by.name(), "count", "denominator", "percent"])
        .expect("in-memory write");
    for row in report.rows.iter().chain(&report.total) {
        w.write_record([
            row.key.clone(),
            row.count.to_string(),
            row.denominator.to_string(),
            row.percent.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// The wrapper every persisted line carries.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema: &'a str,
    pub record: &'a str,
    #[serde(flatten)]
    pub body: T,
}

/// Serializes `records` as NDJSON lines tagged with `kind`.
pub fn ndjson_lines<T: Serialize>(kind: &str, records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let line = Envelope {
            schema: SCHEMA,
            record: kind,
            body: r,
        };
        serde_json::to_writer(&mut out, &line).expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Appends NDJSON lines to `path` under an exclusive lock.
pub fn append_ndjson<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> io::Result<()> {
    let bytes = ndjson_lines(kind, records);
    let mut file: File = OpenOptions::new().create(true).append(true).open(path)?;
    file.lock()?;
    let written = file.write_all(&bytes).and_then(|_| file.flush());
    file.unlock()?;
    written
}

/// Reads back lines of one record kind from an NDJSON file.
pub fn read_ndjson<T: serde::de::DeserializeOwned>(text: &str, kind: &str) -> Result<Vec<T>, serde_json::Error> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("record").and_then(|r| r.as_str()) == Some(kind) {
            out.push(serde_json::from_value(value)?);
        }
    }
    Ok(out)
}
