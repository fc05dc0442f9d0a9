use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn desk(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/desk").join(name)
}

fn periscan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_periscan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn sim_flags() -> Vec<String> {
    vec![
        "--topology".into(),
        desk("topology.toml").display().to_string(),
        "--seed".into(),
        "42".into(),
        "--rate".into(),
        "20000".into(),
    ]
}

fn run_ok(dir: &Path, args: &[&str]) {
    let mut all: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    all.extend(sim_flags());
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    let out = periscan(dir, &refs);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn records(path: &Path, kind: &str) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["record"] == kind)
        .collect()
}

#[test]
fn staged_commands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pool = desk("pool.csv").display().to_string();
    let targets = desk("targets.txt").display().to_string();

    run_ok(d, &["ingest", &pool, "--out", "pool.ndjson"]);
    let pool_records = records(&d.join("pool.ndjson"), "pool");
    assert_eq!(pool_records.len(), 6);
    assert!(pool_records.iter().any(|r| r["class"] == "too_short"));
    assert!(pool_records.iter().any(|r| r["class"] == "too_long"));

    let select = [
        "select",
        "--pool",
        "pool.ndjson",
        "--tau",
        "2m",
        "--budget",
        "512",
        "--exploratory-budget",
        "4096",
    ];
    run_ok(d, &[&select[..], &["--out", "sel.csv"]].concat());
    let csv = std::fs::read_to_string(d.join("sel.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let selected: Vec<&str> = rows.iter().filter(|r| r.len() == 5).map(|r| r[0]).collect();
    assert_eq!(
        selected,
        [
            "2001:1210::/28",
            "2001:1270::/28",
            "2400:cb00::/32",
            "2800:a0::/32",
            "2a02:1000::/32"
        ]
    );
    assert!(
        rows.contains(&vec![
            "2400:cb00:1::/52",
            "64500",
            "Example Telecom",
            "JP",
            "APNIC",
            "too_long"
        ]),
        "{csv}"
    );
    assert!(rows.iter().all(|r| !r[4].is_empty()));

    run_ok(d, &[&select[..], &["--format", "ndjson", "--out", "sel.ndjson"]].concat());
    let as_records: Vec<String> = records(&d.join("sel.ndjson"), "prefix")
        .into_iter()
        .filter(|r| r["selected"] == true)
        .map(|r| r["prefix"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(as_records, selected);

    run_ok(d, &["scan", "--pool", "sel.csv", "--budget", "3000", "--out", "dev.ndjson"]);
    let devices = records(&d.join("dev.ndjson"), "device");
    assert!(devices.len() > 500);
    assert!(devices.iter().all(|r| r["provenance"]["rir"].is_string()));

    run_ok(
        d,
        &[
            "loops",
            "--devices",
            "dev.ndjson",
            "--hop",
            "32",
            "--inc",
            "2",
            "--trials",
            "2",
            "--out",
            "loops.ndjson",
        ],
    );
    let loops = records(&d.join("loops.ndjson"), "loop_evidence");
    assert_eq!(loops.len(), devices.len());
    assert!(loops.iter().any(|r| r["verdict"] == "confirmed"));

    run_ok(
        d,
        &[
            "services",
            "--devices",
            &targets,
            "--services",
            "dns,ftp",
            "--timeout",
            "3s",
            "--out",
            "exp.ndjson",
        ],
    );
    let exposures = records(&d.join("exp.ndjson"), "exposure");
    assert_eq!(exposures.len(), 12);
    let dns = exposures
        .iter()
        .find(|r| r["device"] == "2001:db8:50::10" && r["service"] == "DNS")
        .unwrap();
    assert_eq!(dns["cves"][0], "CVE-2025-31498");

    run_ok(d, &["hlev", "--targets", &targets, "--out", "hlev.ndjson"]);
    let funnel = records(&d.join("hlev.ndjson"), "funnel");
    let ollama = funnel.iter().find(|r| r["tool"] == "Ollama").unwrap();
    assert_eq!(ollama["r2"], 1);

    run_ok(
        d,
        &[
            "report",
            "--devices",
            "dev.ndjson",
            "--loops",
            "loops.ndjson",
            "--format",
            "csv",
            "--out",
            "report.csv",
        ],
    );
    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(csv.contains("Total,"));
    assert!(csv.contains("\r\n"));
}

#[test]
fn out_files_are_appended() {
    let dir = tempfile::tempdir().unwrap();
    let pool = desk("pool.csv").display().to_string();
    run_ok(dir.path(), &["ingest", &pool, "--out", "p.ndjson"]);
    run_ok(dir.path(), &["ingest", &pool, "--out", "p.ndjson"]);
    assert_eq!(records(&dir.path().join("p.ndjson"), "pool").len(), 12);
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let pool = desk("pool.csv").display().to_string();
    let targets = desk("targets.txt").display().to_string();
    for out in ["a.ndjson", "b.ndjson"] {
        run_ok(
            dir.path(),
            &[
                "run",
                "--pool",
                &pool,
                "--targets",
                &targets,
                "--budget",
                "512",
                "--discovery-budget",
                "2000",
                "--out",
                out,
            ],
        );
    }
    let a = std::fs::read(dir.path().join("a.ndjson")).unwrap();
    let b = std::fs::read(dir.path().join("b.ndjson")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pool = desk("pool.csv").display().to_string();
    let topo = desk("topology.toml").display().to_string();

    let cases: Vec<Vec<&str>> = vec![
        vec!["select", "--pool", &pool],
        vec!["select", "--pool", &pool, "--topology", &topo, "--rate", "0"],
        vec!["select", "--pool", &pool, "--topology", &topo, "--child-len", "20"],
        vec!["scan", "--pool", &pool, "--topology", &topo, "--shards", "2", "--shard", "2"],
        vec!["services", "--devices", &pool, "--topology", &topo, "--services", "gopher"],
        vec!["select", "--pool", &pool, "--topology", &topo, "--tau", "soon"],
        vec!["select", "--pool", &pool, "--topology", &topo, "--timeout", "-2"],
        vec!["loops", "--targets", "missing.txt", "--topology", &topo],
        vec!["loops", "--targets", &pool, "--topology", &topo, "--strategy", "nope"],
        vec!["select", "--pool", &pool, "--topology", "missing.toml"],
        vec!["scan", "--no-such-flag"],
    ];
    for args in cases {
        let out = periscan(d, &args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[cfg(not(feature = "live"))]
#[test]
fn live_backend_absent_without_feature() {
    let dir = tempfile::tempdir().unwrap();
    let pool = desk("pool.csv").display().to_string();
    let out = periscan(
        dir.path(),
        &["select", "--backend", "live", "--source", "2001:db8::1", "--pool", &pool],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown backend"));
}
