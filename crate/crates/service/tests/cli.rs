use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use tokio::sync::broadcast;

use aserv::api::{router, AppState};
use aserv_core::query::QueryEngine;
use aserv_core::{fixture, IngestConfig, MemoryStore};

fn aserv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aserv"))
        .args(args)
        .env_remove("ASERV_CONFIG")
        .output()
        .unwrap()
}

fn ok_stdout(args: &[&str]) -> String {
    let out = aserv(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fixture_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok_stdout(&["gen", "--fixture", "--out", dir.path().to_str().unwrap()]);
    dir
}

const QUERIES: [&[&str]; 5] = [
    &["probe", "--ts", "4", "--te", "7"],
    &["probe", "--ts", "1", "--te", "2"],
    &["list", "--ts", "1", "--te", "10", "--x", "0.25", "--y", "0.25", "--r", "0.2"],
    &["stretch", "--eid", "oid3|5", "--dt1", "1", "--dt2", "1"],
    &["accuracy", "--ts", "1", "--te", "10", "--x", "0.5", "--y", "0.5", "--r", "0.4"],
];

fn query_args<'a>(q: &[&'a str], source: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["query"];
    args.extend_from_slice(q);
    args.extend_from_slice(source);
    args
}

#[test]
fn data_dir_and_url_give_identical_json() {
    let dir = fixture_dir();
    let data = dir.path().to_str().unwrap();

    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let store = MemoryStore::new().shared();
    let pipeline = fixture::load(store.clone(), IngestConfig::default()).unwrap();
    let (events, _) = broadcast::channel(4);
    let app = router(AppState {
        engine: Arc::new(QueryEngine::new(store, fixture::grids(), pipeline.watermark())),
        master: pipeline.master().clone(),
        sim: None,
        events,
    });
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });

    for q in QUERIES {
        let local = ok_stdout(&query_args(q, &["--data-dir", data]));
        let remote = ok_stdout(&query_args(q, &["--url", &url]));
        assert_eq!(local, remote, "{q:?}");
        assert!(local.starts_with('{'), "{local}");
    }
    assert_eq!(ok_stdout(&query_args(QUERIES[0], &["--url", &url])).trim(), r#"{"count":3}"#);

    let missing = aserv(&query_args(&["stretch", "--eid", "oid3|4"], &["--url", &url]));
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("404"));
}

#[test]
fn query_needs_a_source() {
    let out = aserv(&["query", "probe", "--ts", "1", "--te", "2"]);
    assert!(!out.status.success());
}

#[test]
fn generated_night_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "partitions = 16\n[gen]\nunits = 2\nobjects_per_unit = 100\ncycles = 12\n").unwrap();
    let out = dir.path().join("night");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok_stdout(&["--config", cfg, "gen", "--out", out]);
    assert!(Path::new(out).join("truth.csv").exists());
    let truth = std::fs::read_to_string(Path::new(out).join("truth.csv")).unwrap();
    let events = truth.lines().skip(1).filter(|l| !l.is_empty()).count();

    let probe: serde_json::Value =
        serde_json::from_str(&ok_stdout(&["--config", cfg, "query", "probe", "--ts", "1", "--te", "12", "--data-dir", out]))
            .unwrap();
    assert_eq!(probe["count"].as_u64().unwrap() as usize, events);
}

#[test]
fn fit_reproduces_the_latency_table() {
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/table1.tsv");
    let out = ok_stdout(&["fit", "--training", table, "--k", "19", "--ct", "15"]);
    let line = |w: &str| out.lines().find(|l| l.starts_with(w)).unwrap_or_else(|| panic!("{out}")).to_string();
    assert!(line("probing").contains("T_e=1.88"), "{out}");
    assert!(line("listing").contains("T_e=2.20"), "{out}");
    assert!(line("probing").contains("within_ct=true"));
}

#[test]
fn run_with_zero_cycles_exits_cleanly() {
    let out = aserv(&["run", "--cycles", "0", "--bind", "127.0.0.1:0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}

#[test]
fn run_prints_one_line_per_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.toml");
    std::fs::write(&cfg, "partitions = 16\n[gen]\nunits = 1\nobjects_per_unit = 50\nct = 0.01\n").unwrap();
    let out = ok_stdout(&["--config", cfg.to_str().unwrap(), "run", "--cycles", "5", "--bind", "127.0.0.1:0"]);
    let ts: Vec<u64> = out
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["t"].as_u64().unwrap())
        .collect();
    assert_eq!(ts, [1, 2, 3, 4, 5]);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "alpha = 2.0\n").unwrap();
    let out = aserv(&["--config", cfg.to_str().unwrap(), "run", "--cycles", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}
