use std::io::Read;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::version::html_title;
use super::{ExposureRecord, ServiceId};
use crate::engine::parse_http;

pub const SHIPPED_VENDOR_RULES: &str = include_str!("../../fixtures/vendor_rules.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaField {
    Server,
    WwwAuthenticate,
    XPoweredBy,
    Title,
    Banner,
}

impl MetaField {
    fn parse(s: &str) -> Option<MetaField> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "server" => MetaField::Server,
            "www-authenticate" => MetaField::WwwAuthenticate,
            "x-powered-by" => MetaField::XPoweredBy,
            "title" => MetaField::Title,
            "banner" => MetaField::Banner,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum VendorRuleError {
    #[error("vendor rules: {0}")]
    Csv(#[from] csv::Error),
    #[error("vendor rules line {line}: unknown field {field:?}")]
    Field { line: usize, field: String },
    #[error("vendor rules line {line}: {source}")]
    Regex {
        line: usize,
        #[source]
        source: regex::Error,
    },
}

#[derive(Debug, Clone)]
pub struct VendorRule {
    pub field: MetaField,
    pub pattern: Regex,
    pub vendor: String,
}

/// Ordered rule table; the first rule matching any record decides.
#[derive(Debug, Clone, Default)]
pub struct VendorRules {
    rules: Vec<VendorRule>,
}

#[derive(Deserialize)]
struct RuleRow {
    field: String,
    regex: String,
    vendor: String,
}

impl VendorRules {
    pub fn read<R: Read>(input: R) -> Result<VendorRules, VendorRuleError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(input);
        let mut rules = Vec::new();
        for (i, row) in rdr.deserialize::<RuleRow>().enumerate() {
            let row = row?;
            let line = i + 2;
            let field = MetaField::parse(&row.field).ok_or_else(|| VendorRuleError::Field {
                line,
                field: row.field.clone(),
            })?;
            let pattern = Regex::new(&row.regex).map_err(|source| VendorRuleError::Regex { line, source })?;
            rules.push(VendorRule {
                field,
                pattern,
                vendor: row.vendor,
            });
        }
        Ok(VendorRules { rules })
    }

    pub fn shipped() -> VendorRules {
        VendorRules::read(SHIPPED_VENDOR_RULES.as_bytes()).expect("shipped vendor rules parse")
    }

    pub fn rules(&self) -> &[VendorRule] {
        &self.rules
    }

    pub fn vendors(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rules {
            if !seen.contains(&r.vendor.as_str()) {
                seen.push(&r.vendor);
            }
        }
        seen
    }
}

/// Metadata values of one record for a field.
fn field_values(record: &ExposureRecord, field: MetaField) -> Vec<String> {
    if !record.responsive {
        return Vec::new();
    }
    match record.service {
        ServiceId::Http80 | ServiceId::Http8080 => {
            let Some((_, headers, body)) = parse_http(&record.banner) else {
                return Vec::new();
            };
            let header = |name: &str| {
                headers
                    .iter()
                    .filter(|(k, _)| k.eq_ignore_ascii_case(name))
                    .map(|(_, v)| v.clone())
                    .collect::<Vec<_>>()
            };
            match field {
                MetaField::Server => header("server"),
                MetaField::WwwAuthenticate => header("www-authenticate"),
                MetaField::XPoweredBy => header("x-powered-by"),
                MetaField::Title => html_title(body).into_iter().collect(),
                MetaField::Banner => Vec::new(),
            }
        }
        ServiceId::Ftp | ServiceId::Telnet if field == MetaField::Banner => {
            vec![String::from_utf8_lossy(&record.banner).into_owned()]
        }
        _ => Vec::new(),
    }
}

/// Vendor of the device behind `records`, by the first matching rule.
pub fn infer_vendor(records: &[ExposureRecord], rules: &VendorRules) -> Option<String> {
    rules
        .rules
        .iter()
        .find(|rule| {
            records
                .iter()
                .any(|r| field_values(r, rule.field).iter().any(|v| rule.pattern.is_match(v)))
        })
        .map(|rule| rule.vendor.clone())
}
