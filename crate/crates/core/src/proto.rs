//! Minimal application-protocol codecs: DNS, NTP, the TLS hello exchange and
//! HTTP/1.1 framing. Both the scanner (requests out, responses in) and the
//! simulator (the reverse) use them.

pub const DNS_TYPE_A: u16 = 1;
pub const DNS_TYPE_TXT: u16 = 16;
pub const DNS_CLASS_IN: u16 = 1;
pub const DNS_CLASS_CH: u16 = 3;
pub const DNS_RCODE_REFUSED: u8 = 5;

const DNS_QR: u16 = 0x8000;
const DNS_RD: u16 = 0x0100;
const DNS_RA: u16 = 0x0080;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsQuestion {
    pub name: String,
    pub qtype: u16,
    pub qclass: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsRecord {
    pub name: String,
    pub rtype: u16,
    pub class: u16,
    pub ttl: u32,
    pub rdata: Vec<u8>,
}

impl DnsRecord {
    pub fn txt(name: &str, class: u16, text: &str) -> DnsRecord {
        let mut rdata = Vec::new();
        for chunk in text.as_bytes().chunks(255) {
            rdata.push(chunk.len() as u8);
            rdata.extend_from_slice(chunk);
        }
        DnsRecord {
            name: name.to_string(),
            rtype: DNS_TYPE_TXT,
            class,
            ttl: 0,
            rdata,
        }
    }

    /// Concatenated character-strings of a TXT record.
    pub fn txt_value(&self) -> Option<String> {
        if self.rtype != DNS_TYPE_TXT {
            return None;
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.rdata.len() {
            let n = self.rdata[i] as usize;
            out.extend_from_slice(self.rdata.get(i + 1..i + 1 + n)?);
            i += 1 + n;
        }
        Some(String::from_utf8_lossy(&out).into_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsMessage {
    pub id: u16,
    pub flags: u16,
    pub questions: Vec<DnsQuestion>,
    pub answers: Vec<DnsRecord>,
}

impl DnsMessage {
    pub fn is_response(&self) -> bool {
        self.flags & DNS_QR != 0
    }

    pub fn recursion_available(&self) -> bool {
        self.flags & DNS_RA != 0
    }

    pub fn rcode(&self) -> u8 {
        (self.flags & 0x000f) as u8
    }

    pub fn query(id: u16, name: &str, qtype: u16, qclass: u16) -> DnsMessage {
        DnsMessage {
            id,
            flags: DNS_RD,
            questions: vec![DnsQuestion {
                name: name.to_string(),
                qtype,
                qclass,
            }],
            answers: Vec::new(),
        }
    }

    /// A response to `self` carrying `answers`.
    pub fn reply(&self, rcode: u8, recursion_available: bool, answers: Vec<DnsRecord>) -> DnsMessage {
        let mut flags = DNS_QR | (self.flags & DNS_RD) | u16::from(rcode & 0x0f);
        if recursion_available {
            flags |= DNS_RA;
        }
        DnsMessage {
            id: self.id,
            flags,
            questions: self.questions.clone(),
            answers,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        for v in [
            self.id,
            self.flags,
            self.questions.len() as u16,
            self.answers.len() as u16,
            0,
            0,
        ] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for q in &self.questions {
            encode_name(&mut out, &q.name);
            out.extend_from_slice(&q.qtype.to_be_bytes());
            out.extend_from_slice(&q.qclass.to_be_bytes());
        }
        for r in &self.answers {
            encode_name(&mut out, &r.name);
            out.extend_from_slice(&r.rtype.to_be_bytes());
            out.extend_from_slice(&r.class.to_be_bytes());
            out.extend_from_slice(&r.ttl.to_be_bytes());
            out.extend_from_slice(&(r.rdata.len() as u16).to_be_bytes());
            out.extend_from_slice(&r.rdata);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Option<DnsMessage> {
        let word = |i: usize| bytes.get(i..i + 2).map(|b| u16::from_be_bytes([b[0], b[1]]));
        let id = word(0)?;
        let flags = word(2)?;
        let qd = word(4)?;
        let an = word(6)?;
        let mut pos = 12;
        let mut questions = Vec::with_capacity(qd as usize);
        for _ in 0..qd {
            let (name, next) = decode_name(bytes, pos)?;
            questions.push(DnsQuestion {
                name,
                qtype: word(next)?,
                qclass: word(next + 2)?,
            });
            pos = next + 4;
        }
        let mut answers = Vec::with_capacity(an as usize);
        for _ in 0..an {
            let (name, next) = decode_name(bytes, pos)?;
            let rtype = word(next)?;
            let class = word(next + 2)?;
            let ttl = u32::from_be_bytes(bytes.get(next + 4..next + 8)?.try_into().ok()?);
            let len = word(next + 8)? as usize;
            let rdata = bytes.get(next + 10..next + 10 + len)?.to_vec();
            answers.push(DnsRecord {
                name,
                rtype,
                class,
                ttl,
                rdata,
            });
            pos = next + 10 + len;
        }
        Some(DnsMessage {
            id,
            flags,
            questions,
            answers,
        })
    }
}

fn encode_name(out: &mut Vec<u8>, name: &str) {
    for label in name.trim_end_matches('.').split('.').filter(|l| !l.is_empty()) {
        let label = &label.as_bytes()[..label.len().min(63)];
        out.push(label.len() as u8);
        out.extend_from_slice(label);
    }
    out.push(0);
}

/// Decodes a possibly compressed name starting at `pos`; returns the name and
/// the offset just past it in the original stream.
fn decode_name(bytes: &[u8], mut pos: usize) -> Option<(String, usize)> {
    let mut labels: Vec<String> = Vec::new();
    let mut end = None;
    for _ in 0..128 {
        let len = *bytes.get(pos)? as usize;
        if len & 0xc0 == 0xc0 {
            let ptr = ((len & 0x3f) << 8) | *bytes.get(pos + 1)? as usize;
            end.get_or_insert(pos + 2);
            pos = ptr;
            continue;
        }
        if len == 0 {
            return Some((labels.join("."), end.unwrap_or(pos + 1)));
        }
        labels.push(String::from_utf8_lossy(bytes.get(pos + 1..pos + 1 + len)?).into_owned());
        pos += 1 + len;
    }
    None
}

pub const NTP_PACKET_LEN: usize = 48;
pub const NTP_MODE_CLIENT: u8 = 3;
pub const NTP_MODE_SERVER: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NtpPacket {
    pub version: u8,
    pub mode: u8,
    pub stratum: u8,
    pub origin: u64,
    pub transmit: u64,
}

impl NtpPacket {
    pub fn client(transmit: u64) -> NtpPacket {
        NtpPacket {
            version: 4,
            mode: NTP_MODE_CLIENT,
            stratum: 0,
            origin: 0,
            transmit,
        }
    }

    pub fn encode(&self) -> [u8; NTP_PACKET_LEN] {
        let mut out = [0u8; NTP_PACKET_LEN];
        out[0] = (self.version << 3) | self.mode;
        out[1] = self.stratum;
        out[24..32].copy_from_slice(&self.origin.to_be_bytes());
        out[40..48].copy_from_slice(&self.transmit.to_be_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Option<NtpPacket> {
        if bytes.len() < NTP_PACKET_LEN {
            return None;
        }
        Some(NtpPacket {
            version: (bytes[0] >> 3) & 0x07,
            mode: bytes[0] & 0x07,
            stratum: bytes[1],
            origin: u64::from_be_bytes(bytes[24..32].try_into().ok()?),
            transmit: u64::from_be_bytes(bytes[40..48].try_into().ok()?),
        })
    }
}

pub const TLS_HANDSHAKE: u8 = 0x16;
const TLS_CLIENT_HELLO: u8 = 1;
const TLS_SERVER_HELLO: u8 = 2;
const CLIENT_SUITES: [u16; 4] = [0xc02f, 0xc030, 0x009c, 0x002f];

fn tls_record(handshake_type: u8, body: &[u8]) -> Vec<u8> {
    let mut hs = vec![handshake_type];
    hs.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
    hs.extend_from_slice(body);
    let mut rec = vec![TLS_HANDSHAKE, 0x03, 0x01];
    rec.extend_from_slice(&(hs.len() as u16).to_be_bytes());
    rec.extend_from_slice(&hs);
    rec
}

/// A TLS 1.2 ClientHello with a fixed suite list and no extensions.
pub fn tls_client_hello(random: [u8; 32]) -> Vec<u8> {
    let mut body = vec![0x03, 0x03];
    body.extend_from_slice(&random);
    body.push(0);
    body.extend_from_slice(&((CLIENT_SUITES.len() * 2) as u16).to_be_bytes());
    for s in CLIENT_SUITES {
        body.extend_from_slice(&s.to_be_bytes());
    }
    body.extend_from_slice(&[1, 0]);
    tls_record(TLS_CLIENT_HELLO, &body)
}

fn tls_handshake_body(bytes: &[u8], want: u8) -> Option<&[u8]> {
    if bytes.len() < 9 || bytes[0] != TLS_HANDSHAKE || bytes[1] != 0x03 || bytes[5] != want {
        return None;
    }
    let len = u32::from_be_bytes([0, bytes[6], bytes[7], bytes[8]]) as usize;
    bytes.get(9..9 + len)
}

/// Cipher suites offered by a ClientHello.
pub fn parse_client_hello(bytes: &[u8]) -> Option<Vec<u16>> {
    let body = tls_handshake_body(bytes, TLS_CLIENT_HELLO)?;
    let sid_len = *body.get(34)? as usize;
    let at = 35 + sid_len;
    let n = u16::from_be_bytes(body.get(at..at + 2)?.try_into().ok()?) as usize;
    let suites = body.get(at + 2..at + 2 + n)?;
    Some(suites.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
}

pub fn tls_server_hello(version: u16, suite: u16, random: [u8; 32]) -> Vec<u8> {
    let mut body = version.to_be_bytes().to_vec();
    body.extend_from_slice(&random);
    body.push(0);
    body.extend_from_slice(&suite.to_be_bytes());
    body.push(0);
    tls_record(TLS_SERVER_HELLO, &body)
}

/// `(version, cipher suite)` of a ServerHello.
pub fn parse_server_hello(bytes: &[u8]) -> Option<(u16, u16)> {
    let body = tls_handshake_body(bytes, TLS_SERVER_HELLO)?;
    let version = u16::from_be_bytes(body.get(0..2)?.try_into().ok()?);
    let sid_len = *body.get(34)? as usize;
    let at = 35 + sid_len;
    let suite = u16::from_be_bytes(body.get(at..at + 2)?.try_into().ok()?);
    Some((version, suite))
}

pub fn http_get(path: &str, host: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: periscan\r\nAccept: */*\r\nConnection: close\r\n\r\n")
        .into_bytes()
}

/// `(method, path)` from an HTTP request line.
pub fn parse_request_line(bytes: &[u8]) -> Option<(String, String)> {
    let line_end = bytes.iter().position(|&b| b == b'\n')?;
    let line = std::str::from_utf8(&bytes[..line_end]).ok()?.trim_end();
    let mut parts = line.split(' ');
    let method = parts.next()?;
    let path = parts.next()?;
    parts.next().filter(|v| v.starts_with("HTTP/"))?;
    Some((method.to_string(), path.to_string()))
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        301 => "Moved Permanently",
        302 => "Found",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        500 => "Internal Server Error",
        _ => "Unknown",
    }
}

pub fn http_response(status: u16, headers: &[(String, String)], body: &[u8]) -> Vec<u8> {
    let mut out = format!("HTTP/1.1 {status} {}\r\n", reason_phrase(status)).into_bytes();
    for (k, v) in headers {
        out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
    }
    out.extend_from_slice(format!("Content-Length: {}\r\n\r\n", body.len()).as_bytes());
    out.extend_from_slice(body);
    out
}
