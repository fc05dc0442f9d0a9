use std::io::{Read, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::version::{SoftwareVersion, UNKNOWN_VERSION};

pub const SHIPPED_CVE_DB: &str = include_str!("../../fixtures/cve_db.csv");

#[derive(Debug, Error)]
pub enum CveDbError {
    #[error("cve db: {0}")]
    Csv(#[from] csv::Error),
    #[error("cve db line {line}: malformed CVE identifier {id:?}")]
    BadId { line: u64, id: String },
    #[error("cve db line {line}: empty product")]
    EmptyProduct { line: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CveEntry {
    pub product: String,
    pub version_pattern: String,
    pub cve_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "empty_as_none")]
    pub severity: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()))
}

fn cve_id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{4,}$").expect("static pattern"))
}

/// Version-keyed vulnerability table. Entry order is preserved and is the
/// order of `map_cves` output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CveDb {
    entries: Vec<CveEntry>,
}

impl CveDb {
    pub fn new(entries: Vec<CveEntry>) -> Result<CveDb, CveDbError> {
        for (i, e) in entries.iter().enumerate() {
            let line = i as u64 + 2;
            if e.product.trim().is_empty() {
                return Err(CveDbError::EmptyProduct { line });
            }
            if !cve_id_pattern().is_match(&e.cve_id) {
                return Err(CveDbError::BadId {
                    line,
                    id: e.cve_id.clone(),
                });
            }
        }
        Ok(CveDb { entries })
    }

    pub fn shipped() -> CveDb {
        CveDb::read(SHIPPED_CVE_DB.as_bytes()).expect("shipped cve db parses")
    }

    /// Reads `product,version_pattern,cve_id,severity` with a header row.
    pub fn read<R: Read>(input: R) -> Result<CveDb, CveDbError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(input);
        let entries = rdr.deserialize().collect::<Result<Vec<CveEntry>, _>>()?;
        CveDb::new(entries)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), CveDbError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["product", "version_pattern", "cve_id", "severity"])?;
        for e in &self.entries {
            w.write_record([&e.product, &e.version_pattern, &e.cve_id, e.severity.as_deref().unwrap_or("")])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn entries(&self) -> &[CveEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: CveEntry) -> Result<(), CveDbError> {
        let mut next = self.entries.clone();
        next.push(entry);
        *self = CveDb::new(next)?;
        Ok(())
    }

    /// The first wildcard pattern of this product covering `v`, for
    /// reporting versions in buckets such as `2.7x`.
    pub fn bucket(&self, v: &SoftwareVersion) -> SoftwareVersion {
        self.entries
            .iter()
            .filter(|e| e.product.eq_ignore_ascii_case(&v.product))
            .filter(|e| e.version_pattern.contains('x') && version_matches(&e.version_pattern, &v.version_pattern))
            .map(|e| SoftwareVersion {
                product: v.product.clone(),
                version_pattern: e.version_pattern.clone(),
            })
            .next()
            .unwrap_or_else(|| v.clone())
    }
}

/// Matches a concrete version against a db pattern.
///
/// Segments are split on `.` and must be equal in number. A pattern segment
/// ending in `x` matches any segment that starts with the text before the
/// `x` and has at least one more character; a bare `x` matches any segment.
/// The pattern `*` matches every version, including an unknown one.
pub fn version_matches(pattern: &str, version: &str) -> bool {
    let pattern = pattern.trim();
    let version = version.trim();
    if pattern == "*" {
        return true;
    }
    if version.is_empty() || version.eq_ignore_ascii_case(UNKNOWN_VERSION) {
        return pattern.eq_ignore_ascii_case(version);
    }
    let ps: Vec<&str> = pattern.split('.').collect();
    let vs: Vec<&str> = version.split('.').collect();
    ps.len() == vs.len() && ps.iter().zip(&vs).all(|(p, v)| segment_matches(p, v))
}

fn segment_matches(p: &str, v: &str) -> bool {
    match p.strip_suffix(['x', 'X']) {
        Some(stem) => v.len() > stem.len() && v.get(..stem.len()).is_some_and(|head| head.eq_ignore_ascii_case(stem)),
        None => p.eq_ignore_ascii_case(v),
    }
}

/// CVE identifiers whose product matches case-insensitively and whose
/// pattern covers the version, in db order without duplicates.
pub fn map_cves(v: &SoftwareVersion, db: &CveDb) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in &db.entries {
        if e.product.trim().eq_ignore_ascii_case(v.product.trim())
            && version_matches(&e.version_pattern, &v.version_pattern)
            && !out.contains(&e.cve_id)
        {
            out.push(e.cve_id.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(product: &str, version: &str) -> SoftwareVersion {
        SoftwareVersion::new(product, version)
    }

    #[test]
    fn shipped_db_examples() {
        let db = CveDb::shipped();
        assert_eq!(map_cves(&v("dnsmasq", "2.73"), &db), vec!["CVE-2025-31498"]);
        assert_eq!(map_cves(&v("DNSMASQ", "2.79"), &db), vec!["CVE-2025-31498"]);
        assert!(map_cves(&v("dnsmasq", "2.80"), &db).is_empty());
        assert!(map_cves(&v("dnsmasq", "2.7"), &db).is_empty());
        assert!(map_cves(&v("dnsmasq", "2.73.1"), &db).is_empty());
        assert_eq!(
            map_cves(&v("PCMan FTP", "2.0.7"), &db),
            vec!["CVE-2025-31161", "CVE-2025-3679"]
        );
        assert!(map_cves(&v("micro_httpd", UNKNOWN_VERSION), &db).is_empty());
        assert_eq!(map_cves(&v("libsoup", UNKNOWN_VERSION), &db), vec!["CVE-2025-46421"]);
    }

    #[test]
    fn pattern_rules() {
        assert!(version_matches("3.0.x", "3.0.3"));
        assert!(version_matches("x", "12"));
        assert!(!version_matches("x", ""));
        assert!(version_matches("2.7x", "2.7a"));
        assert!(!version_matches("2.7x", "2.7"));
        assert!(version_matches("*", UNKNOWN_VERSION));
        assert!(version_matches("unknown", "unknown"));
        assert!(!version_matches("2.7x", UNKNOWN_VERSION));
    }

    #[test]
    fn ids_are_validated() {
        let bad = "product,version_pattern,cve_id,severity\nfoo,1.0,CVE-25-1,\n";
        assert!(matches!(CveDb::read(bad.as_bytes()), Err(CveDbError::BadId { line: 2, .. })));
        let empty = "product,version_pattern,cve_id,severity\n ,1.0,CVE-2025-1234,\n";
        assert!(matches!(CveDb::read(empty.as_bytes()), Err(CveDbError::EmptyProduct { .. })));
    }

    #[test]
    fn round_trips_and_buckets() {
        let db = CveDb::shipped();
        let mut buf = Vec::new();
        db.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), SHIPPED_CVE_DB);
        assert_eq!(db.bucket(&v("dnsmasq", "2.76")).version_pattern, "2.7x");
        assert_eq!(db.bucket(&v("dnsmasq", "2.85")).version_pattern, "2.85");
    }

    fn entry() -> impl Strategy<Value = CveEntry> {
        (
            prop::sample::select(vec!["dnsmasq", "openssh", "vsftpd", "boa"]),
            prop::sample::select(vec!["*", "2.7x", "2.x", "x.x", "3.0.x", "2.73", "7.4p1"]),
            1000u32..99999,
        )
            .prop_map(|(p, pat, n)| CveEntry {
                product: p.to_string(),
                version_pattern: pat.to_string(),
                cve_id: format!("CVE-2025-{n:04}"),
                severity: None,
            })
    }

    proptest! {
        #[test]
        fn extending_the_db_never_drops_results(
            base in prop::collection::vec(entry(), 0..12),
            extra in prop::collection::vec(entry(), 0..12),
            product in prop::sample::select(vec!["dnsmasq", "OpenSSH", "boa", "lighttpd"]),
            version in prop::sample::select(vec!["2.73", "2.7", "2.1", "3.0.3", "7.4p1", "unknown"]),
        ) {
            let small = CveDb::new(base.clone()).unwrap();
            let mut large = small.clone();
            for e in extra {
                large.push(e).unwrap();
            }
            let sv = v(product, version);
            let before = map_cves(&sv, &small);
            let after = map_cves(&sv, &large);
            prop_assert!(before.iter().all(|id| after.contains(id)));
            prop_assert_eq!(&after[..before.len()], &before[..]);
        }
    }
}
