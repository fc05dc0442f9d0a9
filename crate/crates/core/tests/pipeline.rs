use std::path::PathBuf;

use periscan::engine::RateLimit;
use periscan::hlev::{Stage, Tool};
use periscan::loops::Verdict;
use periscan::pipeline::{read_addresses, run_pipeline, PipelineConfig};
use periscan::prefix::{read_prefix_file, Prefix};
use periscan::rgps::RejectReason;
use periscan::services::ServiceId;
use periscan::simnet::{build_topology, TopologySpec};

fn desk(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/desk").join(name)
}

fn pool() -> Vec<Prefix> {
    let text = std::fs::read_to_string(desk("pool.csv")).unwrap();
    read_prefix_file(text.as_bytes())
        .unwrap()
        .into_iter()
        .map(|r| r.prefix)
        .collect()
}

fn config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_seed(seed);
    cfg.rgps.exploratory_budget = 4096;
    cfg.rgps.scan_budget = 512;
    cfg.discovery.budget = 3000;
    cfg.rate = RateLimit::new(20_000).unwrap();
    cfg.extra_targets = read_addresses(&std::fs::read_to_string(desk("targets.txt")).unwrap()).unwrap();
    cfg
}

fn run(seed: u64) -> (periscan::pipeline::PipelineOutput, Vec<u8>) {
    let spec = TopologySpec::load(&desk("topology.toml")).unwrap();
    let net = build_topology(&spec).unwrap();
    let mut backend = net.backend();
    let out = run_pipeline(&pool(), &config(seed), &mut backend).unwrap();
    let bytes = out.to_ndjson();
    (out, bytes)
}

fn p(s: &str) -> Prefix {
    s.parse().unwrap()
}

#[test]
fn desk_network_end_to_end() {
    let (out, bytes) = run(42);
    let good: Vec<String> = out.selection.good.iter().map(ToString::to_string).collect();
    assert_eq!(
        good,
        [
            "2001:1210::/28",
            "2001:1270::/28",
            "2400:cb00::/32",
            "2800:a0::/32",
            "2a02:1000::/32"
        ]
    );
    assert!(out
        .selection
        .rejected
        .contains(&(p("2c0f:f000::/32"), RejectReason::SilentTimeout)));
    assert!(out
        .selection
        .rejected
        .contains(&(p("2400:cb00:1::/52"), RejectReason::TooLong)));

    assert!(out.devices.len() > 500, "{} devices", out.devices.len());
    assert!(out.devices.iter().all(|d| d.provenance.is_some()));
    let confirmed = out.loops.iter().filter(|e| e.verdict == Verdict::Confirmed).count();
    assert!(confirmed > 0);
    assert_eq!(out.loops.len(), out.devices.len());

    let get = |addr: &str, svc: ServiceId| {
        let a = addr.parse().unwrap();
        out.exposures.iter().find(|r| r.device == a && r.service == svc).unwrap()
    };
    let dns = get("2001:db8:50::10", ServiceId::Dns);
    assert!(dns.responsive);
    assert_eq!(dns.cves, ["CVE-2025-31498"]);
    assert_eq!(dns.vendor.as_deref(), Some("ZTE"));
    assert_eq!(
        get("2001:db8:50::11", ServiceId::Ftp).cves,
        ["CVE-2025-31161", "CVE-2025-3679"]
    );
    assert_eq!(get("2001:db8:50::11", ServiceId::Telnet).vendor.as_deref(), Some("Huawei"));
    assert_eq!(get("2001:db8:50::15", ServiceId::Http8080).vendor.as_deref(), Some("TP-Link"));

    let exposed: Vec<Tool> = out.hlev.exposed.iter().map(|c| c.tool).collect();
    assert_eq!(exposed, [Tool::Ollama, Tool::VLLM]);
    let lobe = out.hlev.candidates.iter().find(|c| c.tool == Tool::LobeChat).unwrap();
    assert_eq!(lobe.stage, Stage::Response1);
    let jan = out.hlev.candidates.iter().find(|c| c.tool == Tool::JanAi).unwrap();
    assert_eq!(jan.stage, Stage::Response1);
    assert!(out.hlev.stats.values().all(|s| s.is_monotone()));

    let text = String::from_utf8(bytes).unwrap();
    assert!(text.lines().all(|l| l.starts_with("{\"schema\":\"periscan/1\"")));
    assert_eq!(out.reports.len(), 4);
}

#[test]
fn same_seed_same_bytes() {
    let (_, a) = run(7);
    let (_, b) = run(7);
    assert_eq!(a, b);
}
