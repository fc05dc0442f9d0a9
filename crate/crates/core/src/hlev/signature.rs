use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tool;
use crate::engine::ResponsePayload;

/// Bytes of body examined by `body` and `grep` rules.
pub const BODY_WINDOW: usize = 16 * 1024;

/// Largest number of bytes allowed between consecutive tokens of a `body` rule.
const TOKEN_GAP: usize = 32;

pub const SHIPPED_SIGNATURES: &str = include_str!("../../fixtures/signatures.csv");

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("signature file: {0}")]
    Csv(#[from] csv::Error),
    #[error("signature record {line}: {reason}")]
    Record { line: u64, reason: String },
}

/// One predicate over the landing response.
///
/// * `body`: the value's whitespace-separated tokens appear in order in the
///   body, each within a short distance of the previous one, ignoring double
///   quotes.
/// * `grep`: case-insensitive substring of the whole response text.
/// * `status`: the numeric status code.
/// * anything else names a header compared case-insensitively with all
///   whitespace removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRule {
    pub field: String,
    pub value: String,
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_ascii_lowercase()
}

fn ordered_tokens(hay: &str, value: &str) -> bool {
    let hay = hay.replace('"', "");
    let value = value.replace('"', "");
    let tokens: Vec<&str> = value.split_whitespace().collect();
    if tokens.is_empty() {
        return false;
    }
    let mut from = 0;
    'start: while let Some(off) = hay[from..].find(tokens[0]) {
        let first = from + off;
        let mut pos = first + tokens[0].len();
        for t in &tokens[1..] {
            match hay[pos..].find(t) {
                Some(gap) if gap <= TOKEN_GAP => pos += gap + t.len(),
                _ => {
                    from = first + tokens[0].len().max(1);
                    continue 'start;
                }
            }
        }
        return true;
    }
    false
}

impl MatchRule {
    pub fn new(field: &str, value: &str) -> MatchRule {
        MatchRule {
            field: field.to_string(),
            value: value.to_string(),
        }
    }

    pub fn matches(&self, response: &ResponsePayload) -> bool {
        let ResponsePayload::AppPayload {
            status_line,
            headers,
            body_prefix,
        } = response
        else {
            return false;
        };
        let body = String::from_utf8_lossy(&body_prefix[..body_prefix.len().min(BODY_WINDOW)]);
        match self.field.to_ascii_lowercase().as_str() {
            "body" => ordered_tokens(&body, &self.value),
            "grep" => {
                let needle = self.value.to_lowercase();
                status_line.to_lowercase().contains(&needle)
                    || headers
                        .iter()
                        .any(|(k, v)| format!("{k}: {v}").to_lowercase().contains(&needle))
                    || body.to_lowercase().contains(&needle)
            }
            "status" => status_line.split_whitespace().nth(1) == Some(self.value.trim()),
            name => {
                let want = squash(&self.value);
                headers.iter().any(|(k, v)| k.eq_ignore_ascii_case(name) && squash(v) == want)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmKind {
    /// `{"models": [{"name": ...}]}`
    OllamaTags,
    /// `{"data": [{"id": ...}]}`
    OpenaiModels,
}

impl ConfirmKind {
    fn as_str(self) -> &'static str {
        match self {
            ConfirmKind::OllamaTags => "ollama_tags",
            ConfirmKind::OpenaiModels => "openai_models",
        }
    }

    fn parse(s: &str) -> Option<ConfirmKind> {
        match s {
            "ollama_tags" => Some(ConfirmKind::OllamaTags),
            "openai_models" => Some(ConfirmKind::OpenaiModels),
            _ => None,
        }
    }

    /// Model identifiers in a listing body; `None` if it does not parse.
    pub fn extract(self, body: &[u8]) -> Option<Vec<String>> {
        let v: serde_json::Value = serde_json::from_slice(body).ok()?;
        let (list, key) = match self {
            ConfirmKind::OllamaTags => (v.get("models")?, "name"),
            ConfirmKind::OpenaiModels => (v.get("data")?, "id"),
        };
        list.as_array()?
            .iter()
            .map(|m| m.get(key).and_then(|n| n.as_str()).map(str::to_string))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmRule {
    pub path: String,
    pub kind: ConfirmKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolProfile {
    pub tool: Tool,
    pub port: u16,
    pub match1: MatchRule,
    pub match2: Option<MatchRule>,
    pub confirm: Option<ConfirmRule>,
}

impl ToolProfile {
    /// All rules hold for the landing response.
    pub fn signature_matches(&self, response: &ResponsePayload) -> bool {
        self.match1.matches(response) && self.match2.as_ref().is_none_or(|m| m.matches(response))
    }

    /// The rules as one line of evidence.
    pub fn describe(&self) -> String {
        let mut s = format!("{}={}", self.match1.field, self.match1.value);
        if let Some(m) = &self.match2 {
            s.push_str(&format!(" & {}={}", m.field, m.value));
        }
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    tool: String,
    port: u16,
    match1_field: String,
    match1_value: String,
    match2_field: String,
    match2_value: String,
    confirm_path: String,
    confirm_kind: String,
}

pub fn read_signatures<R: Read>(input: R) -> Result<Vec<ToolProfile>, SignatureError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::None).from_reader(input);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let bad = |reason: String| SignatureError::Record { line, reason };
        let tool: Tool = row.tool.parse().map_err(bad)?;
        if row.match1_field.is_empty() {
            return Err(bad("match1_field is empty".into()));
        }
        let match2 = match (row.match2_field.is_empty(), row.match2_value.is_empty()) {
            (true, true) => None,
            (false, _) => Some(MatchRule::new(&row.match2_field, &row.match2_value)),
            (true, false) => return Err(bad("match2_value without match2_field".into())),
        };
        let confirm = match (row.confirm_path.is_empty(), row.confirm_kind.is_empty()) {
            (true, true) => None,
            (false, false) => Some(ConfirmRule {
                path: row.confirm_path.clone(),
                kind: ConfirmKind::parse(&row.confirm_kind)
                    .ok_or_else(|| bad(format!("unknown confirm_kind {:?}", row.confirm_kind)))?,
            }),
            _ => return Err(bad("confirm_path and confirm_kind go together".into())),
        };
        out.push(ToolProfile {
            tool,
            port: row.port,
            match1: MatchRule::new(&row.match1_field, &row.match1_value),
            match2,
            confirm,
        });
    }
    Ok(out)
}

pub fn write_signatures<W: Write>(out: W, profiles: &[ToolProfile]) -> Result<(), SignatureError> {
    let mut w = csv::Writer::from_writer(out);
    for p in profiles {
        w.serialize(Row {
            tool: p.tool.name().to_string(),
            port: p.port,
            match1_field: p.match1.field.clone(),
            match1_value: p.match1.value.clone(),
            match2_field: p.match2.as_ref().map(|m| m.field.clone()).unwrap_or_default(),
            match2_value: p.match2.as_ref().map(|m| m.value.clone()).unwrap_or_default(),
            confirm_path: p.confirm.as_ref().map(|c| c.path.clone()).unwrap_or_default(),
            confirm_kind: p.confirm.as_ref().map(|c| c.kind.as_str().to_string()).unwrap_or_default(),
        })?;
    }
    w.flush().map_err(|e| SignatureError::Csv(e.into()))?;
    Ok(())
}

pub fn shipped_profiles() -> Vec<ToolProfile> {
    read_signatures(SHIPPED_SIGNATURES.as_bytes()).expect("shipped signature table parses")
}
