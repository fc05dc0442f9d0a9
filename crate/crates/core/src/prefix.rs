//! IPv6 address and prefix model.
//!
//! Prefixes are always held in canonical form: host bits below the prefix
//! length are zero. Parsing masks sloppy input instead of rejecting it.

use std::fmt;
use std::io::{BufRead, Write};
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Prefix lengths accepted as scan candidates without decomposition.
pub const MIN_CANDIDATE_LEN: u8 = 28;
pub const MAX_CANDIDATE_LEN: u8 = 48;

/// Upper bound on the number of children `decompose` will materialize.
pub const MAX_DECOMPOSE_CHILDREN: u128 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrefixError {
    #[error("missing '/<len>' in {0:?}")]
    MissingLength(String),
    #[error("invalid IPv6 literal {0:?}")]
    InvalidAddress(String),
    #[error("invalid prefix length {0:?}")]
    InvalidLength(String),
    #[error("child length {child} is shorter than parent length {parent}")]
    ChildShorterThanParent { parent: u8, child: u8 },
    #[error("decomposition into {0} children exceeds the materialization limit")]
    TooManyChildren(u128),
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(String),
}

/// A single IPv6 address as a 128-bit integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub u128);

impl Address {
    pub fn to_ipv6(self) -> Ipv6Addr {
        Ipv6Addr::from(self.0)
    }

    pub fn octets(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_octets(octets: [u8; 16]) -> Self {
        Address(u128::from_be_bytes(octets))
    }
}

impl From<Ipv6Addr> for Address {
    fn from(a: Ipv6Addr) -> Self {
        Address(u128::from(a))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_ipv6().fmt(f)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.to_ipv6())
    }
}

impl FromStr for Address {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<Ipv6Addr>()
            .map(Address::from)
            .map_err(|_| PrefixError::InvalidAddress(s.to_string()))
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Regional Internet Registry. Unknown registries keep their raw text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rir {
    Afrinic,
    Apnic,
    Arin,
    Lacnic,
    Ripe,
    Other(String),
}

impl Rir {
    pub fn parse(s: &str) -> Rir {
        match s.trim().to_ascii_uppercase().as_str() {
            "AFRINIC" => Rir::Afrinic,
            "APNIC" => Rir::Apnic,
            "ARIN" => Rir::Arin,
            "LACNIC" => Rir::Lacnic,
            "RIPE" | "RIPE NCC" | "RIPENCC" => Rir::Ripe,
            _ => Rir::Other(s.trim().to_string()),
        }
    }

    /// Raw text as it should be written back to a prefix file.
    pub fn as_raw(&self) -> &str {
        match self {
            Rir::Afrinic => "AFRINIC",
            Rir::Apnic => "APNIC",
            Rir::Arin => "ARIN",
            Rir::Lacnic => "LACNIC",
            Rir::Ripe => "RIPE",
            Rir::Other(raw) => raw,
        }
    }

    /// Grouping label used in reports; unknown registries collapse to `OTHER`.
    pub fn group_label(&self) -> &str {
        match self {
            Rir::Other(_) => "OTHER",
            known => known.as_raw(),
        }
    }
}

/// Provenance attached to an announced prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PrefixMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asn: Option<u32>,
    #[serde(default)]
    pub isp: String,
    #[serde(default)]
    pub region: String,
    #[serde(default, with = "rir_serde", skip_serializing_if = "Option::is_none")]
    pub rir: Option<Rir>,
}

mod rir_serde {
    use super::Rir;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rir: &Option<Rir>, s: S) -> Result<S::Ok, S::Error> {
        match rir {
            Some(r) => s.serialize_str(r.as_raw()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rir>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        Ok(raw.filter(|s| !s.is_empty()).map(|s| Rir::parse(&s)))
    }
}

/// Outcome of the candidate length gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LengthClass {
    InRange,
    TooShort,
    TooLong,
}

/// A canonical IPv6 prefix. Equality, ordering and hashing ignore `meta`.
#[derive(Clone)]
pub struct Prefix {
    bits: u128,
    len: u8,
    pub meta: Option<PrefixMeta>,
}

fn mask(len: u8) -> u128 {
    match len {
        0 => 0,
        l => u128::MAX << (128 - u32::from(l)),
    }
}

impl Prefix {
    /// Builds a prefix, masking host bits. Panics if `len > 128`.
    pub fn new(addr: Address, len: u8) -> Prefix {
        assert!(len <= 128, "prefix length {len} out of range");
        Prefix {
            bits: addr.0 & mask(len),
            len,
            meta: None,
        }
    }

    pub fn with_meta(mut self, meta: PrefixMeta) -> Prefix {
        self.meta = Some(meta);
        self
    }

    pub fn network(&self) -> Address {
        Address(self.bits)
    }

    pub fn bits(&self) -> u128 {
        self.bits
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    /// Number of host bits, `128 - len`.
    pub fn host_bits(&self) -> u32 {
        128 - u32::from(self.len)
    }

    /// Address count as `2^host_bits`; `None` for `::/0`, which overflows `u128`.
    pub fn size(&self) -> Option<u128> {
        1u128.checked_shl(self.host_bits())
    }

    pub fn last(&self) -> Address {
        Address(self.bits | !mask(self.len))
    }

    pub fn contains(&self, addr: Address) -> bool {
        addr.0 & mask(self.len) == self.bits
    }

    pub fn contains_prefix(&self, other: &Prefix) -> bool {
        other.len >= self.len && self.contains(other.network())
    }

    /// The `len`-bit prefix covering this prefix's network address.
    pub fn truncate(&self, len: u8) -> Prefix {
        let mut p = Prefix::new(self.network(), len.min(self.len));
        p.meta = self.meta.clone();
        p
    }

    pub fn classify_length(&self) -> LengthClass {
        classify_length(self)
    }

    /// Children of length `child_len` in ascending order, inheriting meta.
    pub fn decompose(&self, child_len: u8) -> Result<Vec<Prefix>, PrefixError> {
        decompose(self, child_len)
    }
}

impl PartialEq for Prefix {
    fn eq(&self, other: &Self) -> bool {
        self.bits == other.bits && self.len == other.len
    }
}

impl Eq for Prefix {}

impl std::hash::Hash for Prefix {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.bits.hash(state);
        self.len.hash(state);
    }
}

impl PartialOrd for Prefix {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Prefix {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.bits, self.len).cmp(&(other.bits, other.len))
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.len)
    }
}

impl fmt::Debug for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Prefix({self})")
    }
}

impl FromStr for Prefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_prefix(s)
    }
}

impl Serialize for Prefix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses `<ipv6-literal>/<len>`, masking any host bits.
pub fn parse_prefix(text: &str) -> Result<Prefix, PrefixError> {
    let text = text.trim();
    let (addr, len) = text
        .split_once('/')
        .ok_or_else(|| PrefixError::MissingLength(text.to_string()))?;
    let addr: Address = addr.parse()?;
    let len: u8 = len
        .trim()
        .parse()
        .ok()
        .filter(|l| *l <= 128)
        .ok_or_else(|| PrefixError::InvalidLength(len.to_string()))?;
    Ok(Prefix::new(addr, len))
}

pub fn decompose(parent: &Prefix, child_len: u8) -> Result<Vec<Prefix>, PrefixError> {
    if child_len > 128 {
        return Err(PrefixError::InvalidLength(child_len.to_string()));
    }
    if child_len < parent.len {
        return Err(PrefixError::ChildShorterThanParent {
            parent: parent.len,
            child: child_len,
        });
    }
    let extra = u32::from(child_len - parent.len);
    let count = 1u128
        .checked_shl(extra)
        .filter(|c| *c <= MAX_DECOMPOSE_CHILDREN)
        .ok_or(PrefixError::TooManyChildren(1u128.checked_shl(extra).unwrap_or(u128::MAX)))?;
    let stride_bits = 128 - u32::from(child_len);
    Ok((0..count)
        .map(|i| {
            // stride_bits == 128 only when child_len == 0, which forces count == 1
            let offset = i.checked_shl(stride_bits).unwrap_or(0);
            let mut child = Prefix::new(Address(parent.bits | offset), child_len);
            child.meta = parent.meta.clone();
            child
        })
        .collect())
}

pub fn slash64_of(addr: Address) -> Prefix {
    Prefix::new(addr, 64)
}

pub fn classify_length(p: &Prefix) -> LengthClass {
    if p.len < MIN_CANDIDATE_LEN {
        LengthClass::TooShort
    } else if p.len > MAX_CANDIDATE_LEN {
        LengthClass::TooLong
    } else {
        LengthClass::InRange
    }
}

/// One parsed line of a prefix file, with an optional trailing reason column.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixRecord {
    pub prefix: Prefix,
    pub reason: Option<String>,
}

/// Reads `prefix,asn,isp,region,rir[,reason]` records. `#` lines are comments.
pub fn read_prefix_file<R: BufRead>(reader: R) -> Result<Vec<PrefixRecord>, PrefixError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PrefixError::Io(e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = parse_prefix_line(trimmed).map_err(|e| PrefixError::Record {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn parse_prefix_line(line: &str) -> Result<PrefixRecord, PrefixError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(line.as_bytes());
    let row = rdr
        .records()
        .next()
        .transpose()
        .map_err(|e| PrefixError::Io(e.to_string()))?
        .unwrap_or_default();
    let field = |i: usize| row.get(i).unwrap_or("").to_string();
    let mut prefix = parse_prefix(&field(0))?;
    if row.len() > 1 {
        let asn_raw = field(1);
        let asn = if asn_raw.is_empty() {
            None
        } else {
            let digits = asn_raw.trim_start_matches("AS").trim_start_matches("as");
            Some(
                digits
                    .parse::<u32>()
                    .map_err(|_| PrefixError::Io(format!("invalid asn {asn_raw:?}")))?,
            )
        };
        let rir = field(4);
        prefix.meta = Some(PrefixMeta {
            asn,
            isp: field(2),
            region: field(3),
            rir: (!rir.is_empty()).then(|| Rir::parse(&rir)),
        });
    }
    let reason = row.get(5).filter(|r| !r.is_empty()).map(str::to_string);
    Ok(PrefixRecord { prefix, reason })
}

/// Writes records in the same format `read_prefix_file` accepts.
pub fn write_prefix_file<W: Write>(out: W, records: &[PrefixRecord]) -> Result<(), PrefixError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).flexible(true).from_writer(out);
    for rec in records {
        let meta = rec.prefix.meta.clone().unwrap_or_default();
        let mut row = vec![
            rec.prefix.to_string(),
            meta.asn.map(|a| a.to_string()).unwrap_or_default(),
            meta.isp,
            meta.region,
            meta.rir.as_ref().map(|r| r.as_raw().to_string()).unwrap_or_default(),
        ];
        if let Some(reason) = &rec.reason {
            row.push(reason.clone());
        }
        w.write_record(&row).map_err(|e| PrefixError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| PrefixError::Io(e.to_string()))
}

/// Drops exact duplicates (same network and length), keeping first occurrence.
/// Nested prefixes stay distinct.
pub fn dedupe_pool(pool: Vec<Prefix>) -> Vec<Prefix> {
    let mut seen = std::collections::HashSet::new();
    pool.into_iter().filter(|p| seen.insert((p.bits, p.len))).collect()
}
