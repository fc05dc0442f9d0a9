use std::collections::{BTreeMap, HashMap};

use super::{ConfirmBehavior, HttpRoute, LlmSpec, Responder, ServiceSpec};
use crate::engine::Transport;
use crate::hlev::Tool;
use crate::proto::{self, DnsMessage, DnsRecord, NtpPacket};

pub(super) struct ServiceTable {
    services: HashMap<(u16, Transport), Responder>,
}

impl ServiceTable {
    pub(super) fn new(services: &[ServiceSpec], llm: Option<&LlmSpec>) -> ServiceTable {
        let mut map: HashMap<(u16, Transport), Responder> = services
            .iter()
            .map(|s| ((s.port, s.transport), s.responder.clone()))
            .collect();
        if let Some(llm) = llm {
            let port = llm.port.unwrap_or(llm.tool.default_port());
            map.insert((port, Transport::Tcp), tool_routes(llm));
        }
        ServiceTable { services: map }
    }

    pub(super) fn get(&self, port: u16, transport: Transport) -> Option<&Responder> {
        self.services.get(&(port, transport))
    }
}

impl Responder {
    /// The bytes sent back for one request; `None` means no answer.
    pub fn respond(&self, request: &[u8]) -> Option<Vec<u8>> {
        match self {
            Responder::Banner { text } => Some(text.as_bytes().to_vec()),
            Responder::Echo => Some(request.to_vec()),
            Responder::Silent => None,
            Responder::Http {
                routes,
                headers,
                fallback,
            } => {
                let (_, target) = proto::parse_request_line(request)?;
                let path = target.split('?').next().unwrap_or("/");
                let not_found = HttpRoute::new(path, 404, "Not Found");
                let route = routes
                    .iter()
                    .find(|r| r.path == path)
                    .or(fallback.as_ref())
                    .unwrap_or(&not_found);
                let mut all: BTreeMap<String, String> = headers.clone();
                all.extend(route.headers.iter().map(|(k, v)| (k.clone(), v.clone())));
                let all: Vec<(String, String)> = all.into_iter().collect();
                Some(proto::http_response(route.status, &all, route.body.as_bytes()))
            }
            Responder::Dns { recursive, version } => {
                let query = DnsMessage::parse(request).filter(|m| !m.is_response())?;
                let q = query.questions.first()?;
                let reply = if q.qclass == proto::DNS_CLASS_CH && q.name.eq_ignore_ascii_case("version.bind") {
                    match version {
                        Some(v) => query.reply(0, *recursive, vec![DnsRecord::txt(&q.name, proto::DNS_CLASS_CH, v)]),
                        None => query.reply(proto::DNS_RCODE_REFUSED, *recursive, Vec::new()),
                    }
                } else if *recursive && q.qtype == proto::DNS_TYPE_A && q.qclass == proto::DNS_CLASS_IN {
                    query.reply(
                        0,
                        true,
                        vec![DnsRecord {
                            name: q.name.clone(),
                            rtype: proto::DNS_TYPE_A,
                            class: proto::DNS_CLASS_IN,
                            ttl: 300,
                            rdata: vec![192, 0, 2, 1],
                        }],
                    )
                } else {
                    query.reply(proto::DNS_RCODE_REFUSED, false, Vec::new())
                };
                Some(reply.encode())
            }
            Responder::Ntp { stratum } => {
                let req = NtpPacket::parse(request).filter(|p| p.mode == proto::NTP_MODE_CLIENT)?;
                let reply = NtpPacket {
                    version: req.version,
                    mode: proto::NTP_MODE_SERVER,
                    stratum: *stratum,
                    origin: req.transmit,
                    transmit: req.transmit.wrapping_add(1 << 32),
                };
                Some(reply.encode().to_vec())
            }
            Responder::Tls { version } => {
                let suites = proto::parse_client_hello(request)?;
                let suite = *suites.first()?;
                Some(proto::tls_server_hello(*version, suite, [0x5a; 32]))
            }
        }
    }
}

fn json_models(tool: Tool, models: &[String]) -> String {
    let quoted = |m: &String| serde_json::to_string(m).expect("string serializes");
    match tool {
        Tool::Ollama => {
            let items: Vec<String> = models
                .iter()
                .map(|m| format!("{{\"name\":{0},\"model\":{0},\"size\":4661224676}}", quoted(m)))
                .collect();
            format!("{{\"models\":[{}]}}", items.join(","))
        }
        _ => {
            let items: Vec<String> = models
                .iter()
                .map(|m| format!("{{\"id\":{},\"object\":\"model\",\"owned_by\":\"local\"}}", quoted(m)))
                .collect();
            format!("{{\"object\":\"list\",\"data\":[{}]}}", items.join(","))
        }
    }
}

/// HTTP behavior of an emulated tool: the landing response its signature
/// targets plus its model-listing endpoint.
pub fn tool_routes(llm: &LlmSpec) -> Responder {
    let tool = llm.tool;
    let landing = match tool {
        Tool::Ollama => HttpRoute::new("/", 200, "Ollama is running").header("Content-Type", "text/plain; charset=utf-8"),
        Tool::LMStudio => HttpRoute::new("/", 200, "{\"error\":\"Unexpected endpoint or method. (GET /)\"}")
            .header("Content-Type", "application/json"),
        Tool::GPT4All => HttpRoute::new("/", 404, "GPT4All API server").header("Content-Type", "application/x-empty"),
        Tool::JanAi => HttpRoute::new("/", 302, "").header("Location", "./static/index.html"),
        Tool::VLLM => HttpRoute::new("/", 404, "{\"detail\":\"Not Found\"}")
            .header("Content-Type", "application/json")
            .header("Server", "uvicorn (vLLM)"),
        Tool::Xinference => HttpRoute::new("/", 307, "").header("Location", "/ui/"),
        Tool::LobeChat => HttpRoute::new(
            "/",
            200,
            "<!DOCTYPE html><html><head><title>LobeChat</title></head><body><div id=\"lobechat\"></div></body></html>",
        )
        .header("Content-Type", "text/html"),
    };
    let mut routes = vec![landing];
    if let Some(path) = tool.model_list_path() {
        let route = match llm.confirm {
            ConfirmBehavior::Open => HttpRoute::new(path, 200, &json_models(tool, &llm.models)),
            ConfirmBehavior::AuthRequired => HttpRoute::new(path, 401, "{\"error\":\"unauthorized\"}"),
            ConfirmBehavior::Malformed => HttpRoute::new(path, 200, "{\"models\": [oops"),
        };
        routes.push(route.header("Content-Type", "application/json"));
    }
    Responder::Http {
        routes,
        headers: BTreeMap::new(),
        fallback: None,
    }
}
