//! Exposure of eight common services, with version extraction, CVE
//! correlation and vendor inference from the captured metadata.

mod cve;
mod vendor;
mod version;

pub use cve::{map_cves, version_matches, CveDb, CveDbError, CveEntry, SHIPPED_CVE_DB};
pub use vendor::{infer_vendor, MetaField, VendorRule, VendorRuleError, VendorRules, SHIPPED_VENDOR_RULES};
pub use version::{extract_version, html_title, SoftwareVersion, UNKNOWN_VERSION};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    hex_bytes, Probe, ProbeResponse, ProbeSpec, ResponsePayload, ScanError, Scanner, Transport, DEFAULT_RETRIES, DEFAULT_TIMEOUT,
};
use crate::prefix::Address;
use crate::proto::{self, DnsMessage, NtpPacket};

/// Captured bytes per service are cut at this length.
pub const BANNER_CAP: usize = 4096;
pub const DEFAULT_DNS_PROBE_NAME: &str = "periscan-probe.example";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ServiceId {
    Dns,
    Ntp,
    Ftp,
    Ssh,
    Telnet,
    Http80,
    Tls,
    Http8080,
}

impl ServiceId {
    pub const ALL: [ServiceId; 8] = [
        ServiceId::Dns,
        ServiceId::Ntp,
        ServiceId::Ftp,
        ServiceId::Ssh,
        ServiceId::Telnet,
        ServiceId::Http80,
        ServiceId::Tls,
        ServiceId::Http8080,
    ];

    pub fn port(self) -> u16 {
        match self {
            ServiceId::Dns => 53,
            ServiceId::Ntp => 123,
            ServiceId::Ftp => 21,
            ServiceId::Ssh => 22,
            ServiceId::Telnet => 23,
            ServiceId::Http80 => 80,
            ServiceId::Tls => 443,
            ServiceId::Http8080 => 8080,
        }
    }

    pub fn transport(self) -> Transport {
        match self {
            ServiceId::Dns | ServiceId::Ntp => Transport::Udp,
            _ => Transport::Tcp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ServiceId::Dns => "DNS",
            ServiceId::Ntp => "NTP",
            ServiceId::Ftp => "FTP",
            ServiceId::Ssh => "SSH",
            ServiceId::Telnet => "TELNET",
            ServiceId::Http80 => "HTTP80",
            ServiceId::Tls => "TLS",
            ServiceId::Http8080 => "HTTP8080",
        }
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown service {0:?}")]
pub struct UnknownService(pub String);

impl FromStr for ServiceId {
    type Err = UnknownService;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServiceId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownService(s.to_string()))
    }
}

/// What one device exposes on one service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub device: Address,
    pub service: ServiceId,
    pub responsive: bool,
    /// The validated response, at most `BANNER_CAP` bytes. For DNS this is
    /// the `version.bind` reply when one arrived.
    #[serde(with = "hex_bytes")]
    pub banner: Vec<u8>,
    pub extracted: Option<SoftwareVersion>,
    pub vendor: Option<String>,
    pub cves: Vec<String>,
}

impl ExposureRecord {
    fn closed(device: Address, service: ServiceId) -> ExposureRecord {
        ExposureRecord {
            device,
            service,
            responsive: false,
            banner: Vec::new(),
            extracted: None,
            vendor: None,
            cves: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceScanOptions {
    /// Name resolved in the open-resolver check.
    pub dns_name: String,
    pub timeout: Duration,
    pub retries: u8,
}

impl Default for ServiceScanOptions {
    fn default() -> Self {
        ServiceScanOptions {
            dns_name: DEFAULT_DNS_PROBE_NAME.to_string(),
            timeout: DEFAULT_TIMEOUT,
            retries: DEFAULT_RETRIES,
        }
    }
}

#[derive(Debug, Error)]
#[error("service scan aborted: {source}")]
pub struct ServiceScanError {
    #[source]
    pub source: ScanError,
    /// Records for every requested pair, built from what arrived before the failure.
    pub partial: Vec<ExposureRecord>,
}

fn query_id(device: Address, salt: u16) -> u16 {
    let b = device.0;
    ((b >> 64) as u16) ^ (b as u16) ^ ((b >> 16) as u16).rotate_left(5) ^ salt
}

fn requests(device: Address, service: ServiceId, opts: &ServiceScanOptions) -> Vec<Vec<u8>> {
    match service {
        ServiceId::Dns => vec![
            DnsMessage::query(query_id(device, 0), &opts.dns_name, proto::DNS_TYPE_A, proto::DNS_CLASS_IN).encode(),
            DnsMessage::query(
                query_id(device, 0x5a5a),
                "version.bind",
                proto::DNS_TYPE_TXT,
                proto::DNS_CLASS_CH,
            )
            .encode(),
        ],
        ServiceId::Ntp => vec![NtpPacket::client(u64::from(query_id(device, 0x7e7e)) << 32).encode().to_vec()],
        ServiceId::Ssh => vec![b"SSH-2.0-periscan\r\n".to_vec()],
        ServiceId::Ftp | ServiceId::Telnet => vec![b"\r\n".to_vec()],
        ServiceId::Http80 | ServiceId::Http8080 => {
            vec![proto::http_get("/", &format!("[{device}]:{}", service.port()))]
        }
        ServiceId::Tls => {
            let mut random = [0u8; 32];
            random[..16].copy_from_slice(&device.octets());
            vec![proto::tls_client_hello(random)]
        }
    }
}

fn raw_bytes(payload: &ResponsePayload) -> Option<Vec<u8>> {
    let ResponsePayload::AppPayload {
        status_line,
        headers,
        body_prefix,
    } = payload
    else {
        return None;
    };
    if status_line.is_empty() {
        return Some(body_prefix.clone());
    }
    let mut out = format!("{status_line}\r\n").into_bytes();
    for (k, v) in headers {
        out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(body_prefix);
    out.truncate(BANNER_CAP);
    Some(out)
}

/// Whether `bytes` is a protocol-valid answer from `service`.
fn valid_response(service: ServiceId, bytes: &[u8], opts: &ServiceScanOptions) -> bool {
    match service {
        ServiceId::Dns => DnsMessage::parse(bytes).is_some_and(|m| {
            m.is_response()
                && m.rcode() == 0
                && m.questions
                    .first()
                    .is_some_and(|q| q.name.eq_ignore_ascii_case(&opts.dns_name))
                && m.answers
                    .iter()
                    .any(|a| a.rtype == proto::DNS_TYPE_A && a.name.eq_ignore_ascii_case(&opts.dns_name))
        }),
        ServiceId::Ntp => NtpPacket::parse(bytes).is_some_and(|p| p.mode == proto::NTP_MODE_SERVER),
        ServiceId::Tls => proto::parse_server_hello(bytes).is_some(),
        ServiceId::Http80 | ServiceId::Http8080 => bytes.starts_with(b"HTTP/"),
        ServiceId::Ftp | ServiceId::Ssh | ServiceId::Telnet => !bytes.is_empty(),
    }
}

fn is_version_bind_reply(bytes: &[u8]) -> bool {
    DnsMessage::parse(bytes)
        .is_some_and(|m| m.questions.first().is_some_and(|q| q.qclass == proto::DNS_CLASS_CH) && !m.answers.is_empty())
}

fn assemble(
    devices: &[Address],
    services: &BTreeSet<ServiceId>,
    responses: Vec<ProbeResponse>,
    opts: &ServiceScanOptions,
) -> Vec<ExposureRecord> {
    let mut got: HashMap<(Address, u16), Vec<Vec<u8>>> = HashMap::new();
    for r in responses {
        if let (Some(port), Some(bytes)) = (r.port, raw_bytes(&r.payload)) {
            got.entry((r.target, port)).or_default().push(bytes);
        }
    }
    let mut out = Vec::with_capacity(devices.len() * services.len());
    for &device in devices {
        for &service in services {
            let answers = got.get(&(device, service.port())).map(Vec::as_slice).unwrap_or(&[]);
            let Some(valid) = answers.iter().find(|b| valid_response(service, b, opts)) else {
                out.push(ExposureRecord::closed(device, service));
                continue;
            };
            let banner = if service == ServiceId::Dns {
                answers.iter().find(|b| is_version_bind_reply(b)).unwrap_or(valid)
            } else {
                valid
            };
            let banner = banner[..banner.len().min(BANNER_CAP)].to_vec();
            out.push(ExposureRecord {
                device,
                service,
                responsive: true,
                extracted: extract_version(service, &banner),
                banner,
                vendor: None,
                cves: Vec::new(),
            });
        }
    }
    out
}

/// Probes every device on every requested service. Records come back grouped
/// by device in input order, services in canonical order.
pub fn scan_many(
    devices: &[Address],
    services: &BTreeSet<ServiceId>,
    opts: &ServiceScanOptions,
    scanner: &mut Scanner<'_>,
) -> Result<Vec<ExposureRecord>, ServiceScanError> {
    let mut probes = Vec::new();
    for &device in devices {
        for &service in services {
            for request in requests(device, service, opts) {
                let spec = ProbeSpec::app(service.transport(), service.port(), request, BANNER_CAP)
                    .expect("service ports are non-zero")
                    .with_timeout(opts.timeout)
                    .with_retries(opts.retries);
                probes.push(Probe { target: device, spec });
            }
        }
    }
    let mut responses = Vec::new();
    let result = scanner.run(probes, &mut responses);
    let records = assemble(devices, services, responses, opts);
    match result {
        Ok(_) => Ok(records),
        Err(source) => Err(ServiceScanError {
            source,
            partial: records,
        }),
    }
}

/// One record per requested service for a single device.
pub fn scan_services(
    device: Address,
    services: &BTreeSet<ServiceId>,
    scanner: &mut Scanner<'_>,
) -> Result<Vec<ExposureRecord>, ServiceScanError> {
    scan_many(&[device], services, &ServiceScanOptions::default(), scanner)
}

/// Fills CVEs from `db` and the per-device vendor from `rules`.
pub fn annotate(records: &mut [ExposureRecord], db: &CveDb, rules: &VendorRules) {
    for r in records.iter_mut() {
        r.cves = r.extracted.as_ref().map(|v| map_cves(v, db)).unwrap_or_default();
    }
    let mut start = 0;
    while start < records.len() {
        let device = records[start].device;
        let end = start + records[start..].iter().take_while(|r| r.device == device).count();
        let vendor = infer_vendor(&records[start..end], rules);
        for r in &mut records[start..end] {
            r.vendor = if r.responsive { vendor.clone() } else { None };
        }
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RateLimit;
    use crate::simnet::{build_topology, HostSpec, HttpRoute, Responder, ServiceSpec, TopologySpec};

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn all() -> BTreeSet<ServiceId> {
        ServiceId::ALL.into_iter().collect()
    }

    #[test]
    fn fixed_service_table() {
        let table: Vec<(&str, u16, Transport)> = ServiceId::ALL.iter().map(|s| (s.name(), s.port(), s.transport())).collect();
        assert_eq!(
            table,
            vec![
                ("DNS", 53, Transport::Udp),
                ("NTP", 123, Transport::Udp),
                ("FTP", 21, Transport::Tcp),
                ("SSH", 22, Transport::Tcp),
                ("TELNET", 23, Transport::Tcp),
                ("HTTP80", 80, Transport::Tcp),
                ("TLS", 443, Transport::Tcp),
                ("HTTP8080", 8080, Transport::Tcp),
            ]
        );
        assert_eq!("http8080".parse::<ServiceId>(), Ok(ServiceId::Http8080));
        assert!("gopher".parse::<ServiceId>().is_err());
    }

    fn kitchen_sink() -> TopologySpec {
        let full = HostSpec::new(a("2001:db8::10"), 6)
            .service(ServiceSpec::udp(
                53,
                Responder::Dns {
                    recursive: true,
                    version: Some("dnsmasq-2.73".into()),
                },
            ))
            .service(ServiceSpec::udp(123, Responder::Ntp { stratum: 2 }))
            .service(ServiceSpec::tcp(
                21,
                Responder::Banner {
                    text: "220 vsFTPd 3.0.3\r\n".into(),
                },
            ))
            .service(ServiceSpec::tcp(
                22,
                Responder::Banner {
                    text: "SSH-2.0-dropbear\r\n".into(),
                },
            ))
            .service(ServiceSpec::tcp(
                23,
                Responder::Banner {
                    text: "ZXHN H108N login: ".into(),
                },
            ))
            .service(ServiceSpec::tcp(
                80,
                Responder::Http {
                    routes: vec![HttpRoute::new("/", 200, "<title>router</title>").header("Server", "micro_httpd")],
                    headers: Default::default(),
                    fallback: None,
                },
            ))
            .service(ServiceSpec::tcp(443, Responder::Tls { version: 0x0303 }))
            .service(ServiceSpec::tcp(8080, Responder::Silent));
        let http_only = HostSpec::new(a("2001:db8::20"), 6).service(ServiceSpec::tcp(
            80,
            Responder::Http {
                routes: vec![],
                headers: Default::default(),
                fallback: None,
            },
        ));
        let closed_dns = HostSpec::new(a("2001:db8::30"), 6).service(ServiceSpec::udp(
            53,
            Responder::Dns {
                recursive: false,
                version: None,
            },
        ));
        TopologySpec {
            hosts: vec![full, http_only, closed_dns],
            ..TopologySpec::default()
        }
    }

    #[test]
    fn scans_every_service() {
        let net = build_topology(&kitchen_sink()).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(1000).unwrap(), 9);
        let devices = [a("2001:db8::10"), a("2001:db8::20"), a("2001:db8::30"), a("2001:db8::40")];
        let mut records = scan_many(&devices, &all(), &ServiceScanOptions::default(), &mut s).unwrap();
        assert_eq!(records.len(), 32);
        let open: Vec<(Address, ServiceId)> = records
            .iter()
            .filter(|r| r.responsive)
            .map(|r| (r.device, r.service))
            .collect();
        let mut want: Vec<(Address, ServiceId)> = ServiceId::ALL
            .iter()
            .filter(|s| **s != ServiceId::Http8080)
            .map(|s| (devices[0], *s))
            .collect();
        want.push((devices[1], ServiceId::Http80));
        assert_eq!(open, want);

        annotate(&mut records, &CveDb::shipped(), &VendorRules::shipped());
        let get = |d: Address, s: ServiceId| records.iter().find(|r| r.device == d && r.service == s).unwrap();
        let dns = get(devices[0], ServiceId::Dns);
        assert_eq!(dns.extracted, Some(SoftwareVersion::new("dnsmasq", "2.73")));
        assert_eq!(dns.cves, vec!["CVE-2025-31498"]);
        assert_eq!(dns.vendor.as_deref(), Some("ZTE"));
        assert_eq!(
            get(devices[0], ServiceId::Ftp).extracted,
            Some(SoftwareVersion::new("vsFTPd", "3.0.3"))
        );
        assert_eq!(
            get(devices[0], ServiceId::Ssh).extracted,
            Some(SoftwareVersion::new("dropbear", "unknown"))
        );
        assert_eq!(
            get(devices[0], ServiceId::Http80).extracted,
            Some(SoftwareVersion::new("micro_httpd", "unknown"))
        );
        let silent = get(devices[0], ServiceId::Http8080);
        assert!(silent.extracted.is_none() && silent.vendor.is_none() && silent.cves.is_empty());
        assert!(records.iter().filter(|r| !r.responsive).all(|r| r.banner.is_empty()));
    }

    #[test]
    fn single_device_entry_point() {
        let net = build_topology(&kitchen_sink()).unwrap();
        let mut b = net.backend();
        let mut s = Scanner::new(&mut b, RateLimit::new(1000).unwrap(), 9);
        let records = scan_services(a("2001:db8::40"), &all(), &mut s).unwrap();
        assert_eq!(records.len(), 8);
        assert!(records.iter().all(|r| !r.responsive));
        let one: BTreeSet<ServiceId> = [ServiceId::Http80].into();
        let records = scan_services(a("2001:db8::20"), &one, &mut s).unwrap();
        assert_eq!(records.len(), 1);
        assert!(records[0].responsive);
    }

    #[test]
    fn record_json_round_trip() {
        let r = ExposureRecord {
            device: a("2001:db8::1"),
            service: ServiceId::Http8080,
            responsive: true,
            banner: b"HTTP/1.1 200 OK\r\n\r\n".to_vec(),
            extracted: Some(SoftwareVersion::new("Boa", "0.94")),
            vendor: Some("ZTE".into()),
            cves: vec![],
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"service\":\"HTTP8080\""));
        assert_eq!(serde_json::from_str::<ExposureRecord>(&text).unwrap(), r);
    }
}
