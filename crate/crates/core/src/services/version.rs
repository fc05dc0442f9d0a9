use serde::{Deserialize, Serialize};

use super::ServiceId;
use crate::engine::parse_http;
use crate::proto::{DnsMessage, DNS_CLASS_CH};

pub const UNKNOWN_VERSION: &str = "unknown";

/// A product name with a concrete version, a bucket such as `2.7x`, or `unknown`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SoftwareVersion {
    pub product: String,
    pub version_pattern: String,
}

impl SoftwareVersion {
    pub fn new(product: &str, version: &str) -> SoftwareVersion {
        assert!(!product.trim().is_empty(), "product must be non-empty");
        SoftwareVersion {
            product: product.trim().to_string(),
            version_pattern: if version.trim().is_empty() {
                UNKNOWN_VERSION.to_string()
            } else {
                version.trim().to_string()
            },
        }
    }

    fn parsed(product: &str, version: Option<&str>) -> Option<SoftwareVersion> {
        let product = product.trim_matches(|c: char| !c.is_alphanumeric() && c != '!' && c != '\'');
        (!product.is_empty()).then(|| SoftwareVersion::new(product, version.unwrap_or("")))
    }
}

impl std::fmt::Display for SoftwareVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.product, self.version_pattern)
    }
}

fn looks_like_version(token: &str) -> bool {
    let t = token.trim_start_matches(['v', 'V']);
    t.starts_with(|c: char| c.is_ascii_digit()) && t.chars().all(|c| c.is_ascii_alphanumeric() || ".-_".contains(c))
}

/// `name/1.2`, `name_1.2`, `name-1.2`, `name(1.2)` or a bare `name`.
fn split_product_token(token: &str) -> Option<SoftwareVersion> {
    let token = token.trim();
    if let Some((name, rest)) = token.split_once('(') {
        let ver = rest.trim_end_matches(')');
        if !name.is_empty() && looks_like_version(ver) {
            return SoftwareVersion::parsed(name, Some(ver));
        }
    }
    for sep in ['/', '_', '-'] {
        if let Some(i) = token.rfind(sep) {
            let (name, ver) = (&token[..i], &token[i + 1..]);
            if !name.is_empty() && looks_like_version(ver) {
                return SoftwareVersion::parsed(name, Some(ver.trim_start_matches(['v', 'V'])));
            }
        }
    }
    if token.contains('/') {
        let (name, ver) = token.split_once('/').expect("checked");
        return SoftwareVersion::parsed(name, (!ver.is_empty()).then_some(ver));
    }
    SoftwareVersion::parsed(token, None)
}

/// Product words up to the first version-like token, for free-text banners.
fn product_then_version(text: &str) -> Option<SoftwareVersion> {
    let cleaned: String = text.chars().map(|c| if "()[]{}<>,;".contains(c) { ' ' } else { c }).collect();
    let mut words: Vec<&str> = Vec::new();
    for tok in cleaned.split_whitespace() {
        if looks_like_version(tok) {
            if words.is_empty() {
                continue;
            }
            return SoftwareVersion::parsed(
                &words.join(" "),
                Some(tok.trim_end_matches('.').trim_start_matches(['v', 'V'])),
            );
        }
        if tok.contains('/') || tok.contains('_') {
            if let Some(v) = split_product_token(tok).filter(|v| v.version_pattern != UNKNOWN_VERSION) {
                let mut name = words.clone();
                name.push(&v.product);
                return SoftwareVersion::parsed(&name.join(" "), Some(&v.version_pattern));
            }
        }
        words.push(tok);
        if words.len() == 4 {
            break;
        }
    }
    words.first().and_then(|w| SoftwareVersion::parsed(w, None))
}

/// Strips Telnet option negotiation (IAC sequences) and non-printable bytes.
fn printable_text(bytes: &[u8]) -> String {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            0xff => {
                i += match bytes.get(i + 1) {
                    Some(0xfa) => bytes[i..]
                        .windows(2)
                        .position(|w| w == [0xff, 0xf0])
                        .map_or(bytes.len(), |p| p + 2),
                    Some(0xfb..=0xfe) => 3,
                    _ => 2,
                };
                continue;
            }
            b'\n' | b'\r' | b'\t' | 0x20..=0x7e => out.push(bytes[i]),
            b if b >= 0x80 => out.push(b),
            _ => {}
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn first_line(text: &str) -> Option<&str> {
    text.lines().map(str::trim).find(|l| !l.is_empty())
}

/// The `<title>` text of an HTML body.
pub fn html_title(body: &[u8]) -> Option<String> {
    let text = String::from_utf8_lossy(body);
    let lower = text.to_ascii_lowercase();
    let open = lower.find("<title")?;
    let start = open + lower[open..].find('>')? + 1;
    let end = start + lower[start..].find("</title")?;
    let title = text[start..end].trim();
    (!title.is_empty()).then(|| title.to_string())
}

/// Product and version from one captured response.
///
/// `response` is what the service sent back: a full HTTP response, a raw
/// banner, or a DNS reply to a `version.bind` query.
pub fn extract_version(service: ServiceId, response: &[u8]) -> Option<SoftwareVersion> {
    if response.is_empty() {
        return None;
    }
    match service {
        ServiceId::Http80 | ServiceId::Http8080 => {
            let (_, headers, body) = parse_http(response)?;
            let server = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("server"))
                .map(|(_, v)| v.as_str())
                .filter(|v| !v.trim().is_empty());
            match server {
                Some(s) => split_product_token(s.split_whitespace().next()?),
                None => html_title(body).and_then(|t| product_then_version(&t)),
            }
        }
        ServiceId::Ssh => {
            let line = first_line(&printable_text(response))?.to_string();
            let software = line.strip_prefix("SSH-")?.split_once('-')?.1;
            let software = software.split_whitespace().next()?;
            split_product_token(software)
        }
        ServiceId::Ftp | ServiceId::Telnet => {
            let text = printable_text(response);
            let line = first_line(&text)?;
            let line = line
                .split_once([' ', '-'])
                .filter(|(code, _)| code.len() == 3 && code.bytes().all(|b| b.is_ascii_digit()))
                .map_or(line, |(_, rest)| rest);
            product_then_version(line)
        }
        ServiceId::Dns => {
            let reply = DnsMessage::parse(response)?;
            let txt = reply
                .answers
                .iter()
                .filter(|a| a.class == DNS_CLASS_CH)
                .find_map(|a| a.txt_value())?;
            let txt = txt.trim();
            if txt.starts_with(|c: char| c.is_ascii_digit()) {
                let ver = txt.split(|c: char| c == '-' || c.is_whitespace()).next()?;
                return SoftwareVersion::parsed("BIND", Some(ver));
            }
            split_product_token(txt.split_whitespace().next()?)
        }
        ServiceId::Ntp | ServiceId::Tls => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::{self, DnsRecord};

    fn http(headers: &[(&str, &str)], body: &str) -> Vec<u8> {
        let h: Vec<(String, String)> = headers.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        proto::http_response(200, &h, body.as_bytes())
    }

    fn sv(p: &str, v: &str) -> Option<SoftwareVersion> {
        Some(SoftwareVersion::new(p, v))
    }

    #[test]
    fn http_server_header() {
        assert_eq!(
            extract_version(ServiceId::Http80, &http(&[("Server", "micro_httpd")], "")),
            sv("micro_httpd", "unknown")
        );
        assert_eq!(
            extract_version(ServiceId::Http80, &http(&[("Server", "Boa/0.94.14rc21")], "")),
            sv("Boa", "0.94.14rc21")
        );
        assert_eq!(
            extract_version(ServiceId::Http8080, &http(&[("Server", "Jetty(9.4.44.v20210927)")], "")),
            sv("Jetty", "9.4.44.v20210927")
        );
        assert_eq!(
            extract_version(ServiceId::Http80, &http(&[("server", "Apache/2.4.41 (Ubuntu)")], "")),
            sv("Apache", "2.4.41")
        );
        assert_eq!(
            extract_version(ServiceId::Http80, &http(&[], "<html><title>MiniWeb 1.2</title>")),
            sv("MiniWeb", "1.2")
        );
        assert_eq!(extract_version(ServiceId::Http80, &http(&[], "<p>none</p>")), None);
    }

    #[test]
    fn ssh_banners() {
        assert_eq!(
            extract_version(ServiceId::Ssh, b"SSH-2.0-dropbear\r\n"),
            sv("dropbear", "unknown")
        );
        assert_eq!(
            extract_version(ServiceId::Ssh, b"SSH-2.0-dropbear_2012.55\r\n"),
            sv("dropbear", "2012.55")
        );
        assert_eq!(
            extract_version(ServiceId::Ssh, b"SSH-2.0-OpenSSH_7.4p1 Debian-10\r\n"),
            sv("OpenSSH", "7.4p1")
        );
        assert_eq!(extract_version(ServiceId::Ssh, b"garbage"), None);
    }

    #[test]
    fn ftp_and_telnet_banners() {
        assert_eq!(
            extract_version(ServiceId::Ftp, b"220 vsFTPd 3.0.3\r\n"),
            sv("vsFTPd", "3.0.3")
        );
        assert_eq!(
            extract_version(ServiceId::Ftp, b"220 (vsFTPd 3.0.3)\r\n"),
            sv("vsFTPd", "3.0.3")
        );
        assert_eq!(
            extract_version(ServiceId::Ftp, b"220 PCMan FTP 2.0.7 Ready.\r\n"),
            sv("PCMan FTP", "2.0.7")
        );
        assert_eq!(
            extract_version(ServiceId::Ftp, b"220-FRITZ!Box FTP server ready.\r\n"),
            sv("FRITZ!Box", "unknown")
        );
        let telnet = [
            &[0xff, 0xfd, 0x18, 0xff, 0xfb, 0x01][..],
            b"\r\nBusyBox v1.22.1 (2019-05-07)\r\nlogin: ",
        ]
        .concat();
        assert_eq!(extract_version(ServiceId::Telnet, &telnet), sv("BusyBox", "1.22.1"));
        assert_eq!(extract_version(ServiceId::Ftp, b""), None);
    }

    #[test]
    fn dns_version_bind() {
        let q = DnsMessage::query(7, "version.bind", proto::DNS_TYPE_TXT, DNS_CLASS_CH);
        let reply = |txt: &str| {
            q.reply(0, true, vec![DnsRecord::txt("version.bind", DNS_CLASS_CH, txt)])
                .encode()
        };
        assert_eq!(extract_version(ServiceId::Dns, &reply("dnsmasq-2.73")), sv("dnsmasq", "2.73"));
        assert_eq!(extract_version(ServiceId::Dns, &reply("9.16.1-Ubuntu")), sv("BIND", "9.16.1"));
        let refused = q.reply(proto::DNS_RCODE_REFUSED, true, vec![]).encode();
        assert_eq!(extract_version(ServiceId::Dns, &refused), None);
    }
}
