//! Staged verification of exposed local LLM tooling.
//!
//! Stage 0 finds open tool ports with SYN probes, stage 1 checks the HTTP
//! landing response against a per-tool signature, and stage 2 reads the
//! tool's model-listing endpoint and cross-references the names against a
//! list of known models.

mod funnel;
mod signature;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use funnel::{
    run_hlev, stage0_syn_sweep, stage1_http_verify, stage1_verify_batch, stage2_confirm_batch, stage2_model_confirm, Evidence,
    FunnelStats, HlevCandidate, HlevError, HlevReport, KnownModels, Rejection, Stage,
};
pub use signature::{
    read_signatures, shipped_profiles, write_signatures, ConfirmKind, ConfirmRule, MatchRule, SignatureError, ToolProfile,
    BODY_WINDOW, SHIPPED_SIGNATURES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tool {
    Ollama,
    LMStudio,
    GPT4All,
    JanAi,
    VLLM,
    Xinference,
    LobeChat,
}

impl Tool {
    pub const ALL: [Tool; 7] = [
        Tool::Ollama,
        Tool::LMStudio,
        Tool::GPT4All,
        Tool::JanAi,
        Tool::VLLM,
        Tool::Xinference,
        Tool::LobeChat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tool::Ollama => "Ollama",
            Tool::LMStudio => "LMStudio",
            Tool::GPT4All => "GPT4All",
            Tool::JanAi => "JanAi",
            Tool::VLLM => "VLLM",
            Tool::Xinference => "Xinference",
            Tool::LobeChat => "LobeChat",
        }
    }

    pub fn default_port(self) -> u16 {
        match self {
            Tool::Ollama => 11434,
            Tool::LMStudio => 1234,
            Tool::GPT4All => 4891,
            Tool::JanAi => 1337,
            Tool::VLLM => 8000,
            Tool::Xinference => 9997,
            Tool::LobeChat => 3210,
        }
    }

    /// Model-listing endpoint, absent for tools without one.
    pub fn model_list_path(self) -> Option<&'static str> {
        match self {
            Tool::Ollama => Some("/api/tags"),
            Tool::LobeChat => None,
            _ => Some("/v1/models"),
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tool {
    type Err = String;

    fn from_str(s: &str) -> Result<Tool, String> {
        Tool::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown tool {s:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tool_names_roundtrip() {
        for t in Tool::ALL {
            assert_eq!(t.name().parse::<Tool>().unwrap(), t);
        }
        assert!("chatgpt".parse::<Tool>().is_err());
    }
}
