use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use futures::StreamExt;
use serde_json::Value;
use tokio::sync::broadcast;
use tower::ServiceExt;

use aserv::api::{router, AppState};
use aserv::sim::Simulation;
use aserv::Config;
use aserv_core::datagen::{GenConfig, Generator};
use aserv_core::query::QueryEngine;
use aserv_core::{fixture, IngestConfig, MemoryStore, Pipeline};

fn fixture_app() -> Router {
    let store = MemoryStore::new().shared();
    let pipeline = fixture::load(store.clone(), IngestConfig::default()).unwrap();
    let engine = QueryEngine::new(store, fixture::grids(), pipeline.watermark());
    let (events, _) = broadcast::channel(16);
    router(AppState {
        engine: Arc::new(engine),
        master: pipeline.master().clone(),
        sim: None,
        events,
    })
}

async fn call(app: &Router, method: &str, uri: &str) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, String::from_utf8(body.to_vec()).unwrap())
}

async fn get_json(app: &Router, uri: &str) -> Value {
    let (status, body) = call(app, "GET", uri).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {body}");
    serde_json::from_str(&body).unwrap()
}

#[tokio::test]
async fn probe_over_fixture() {
    let app = fixture_app();
    let (status, body) = call(&app, "GET", "/probe?ts=1&te=2").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, r#"{"count":0}"#);
    assert_eq!(get_json(&app, "/probe?ts=4&te=7").await["count"], 3);
    assert_eq!(get_json(&app, "/probe?ts=1&te=10&x=50&y=50&r=1").await["count"], 0);
}

#[tokio::test]
async fn list_and_stretch_over_fixture() {
    let app = fixture_app();
    let list = get_json(&app, "/list?ts=4&te=7").await;
    assert_eq!(list["count"], 3);
    let eids: Vec<&str> = list["events"].as_array().unwrap().iter().map(|e| e["eid"].as_str().unwrap()).collect();
    assert_eq!(eids, ["oid1|3", "oid2|6", "oid3|5"]);
    assert_eq!(list["events"][0]["rows"].as_array().unwrap().len(), 3);

    let stretch = get_json(&app, "/stretch?eid=oid3%7C5&dt1=1&dt2=1").await;
    assert_eq!((stretch["ts"].as_u64(), stretch["te"].as_u64()), (Some(4), Some(7)));
    let ts: Vec<u64> = stretch["rows"].as_array().unwrap().iter().map(|r| r["t"].as_u64().unwrap()).collect();
    assert_eq!(ts, [4, 5, 6, 7]);
}

#[tokio::test]
async fn status_reports_watermark() {
    let app = fixture_app();
    let status = get_json(&app, "/status").await;
    assert_eq!(status["watermark"], fixture::CYCLES);
    assert!(status["key_count"].as_u64().unwrap() > 0);
    assert_eq!(status["units"][0]["committed"], fixture::CYCLES);
    assert!(status["sim"].is_null());
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = fixture_app();
    for (method, uri, code) in [
        ("GET", "/probe?ts=7&te=4", StatusCode::BAD_REQUEST),
        ("GET", "/probe?te=4", StatusCode::BAD_REQUEST),
        ("GET", "/list?ts=1&te=4&x=0.5", StatusCode::BAD_REQUEST),
        ("GET", "/accuracy?ts=1&te=4", StatusCode::BAD_REQUEST),
        ("GET", "/stretch?eid=nobar", StatusCode::BAD_REQUEST),
        ("GET", "/stretch?eid=oid9%7C3", StatusCode::NOT_FOUND),
        ("GET", "/stretch?eid=oid3%7C4", StatusCode::NOT_FOUND),
        ("GET", "/nonsense?ts=1&te=2", StatusCode::NOT_FOUND),
        ("POST", "/sim/pause", StatusCode::CONFLICT),
        ("POST", "/sim/rate?rate=2", StatusCode::CONFLICT),
    ] {
        let (status, body) = call(&app, method, uri).await;
        assert_eq!(status, code, "{method} {uri}: {body}");
        let v: Value = serde_json::from_str(&body).unwrap();
        assert!(v["error"].is_string(), "{body}");
    }
}

#[tokio::test]
async fn accuracy_endpoint() {
    let app = fixture_app();
    let acc = get_json(&app, "/accuracy?ts=1&te=10&x=0.25&y=0.25&r=0.2").await;
    assert_eq!(acc["probe"], 1);
    assert_eq!(acc["pcse"], 1);
    assert_eq!(acc["accuracy"], 1.0);
}

struct Live {
    app: Router,
    sim: Simulation,
    pipeline: Arc<Pipeline>,
}

fn live(cycles: u64, ct: f64) -> Live {
    let cfg = Config {
        partitions: Some(16),
        gen: GenConfig {
            units: 1,
            objects_per_unit: 200,
            ct,
            ..GenConfig::default()
        },
        ..Config::default()
    };
    let grids = cfg.grids().unwrap();
    let store = MemoryStore::new().shared();
    let pipeline = Arc::new(Pipeline::new(store.clone(), grids.clone(), cfg.ingest()).unwrap());
    let engine = QueryEngine::new(store, grids, pipeline.watermark());
    let (tx, _) = broadcast::channel(1024);
    let sim = Simulation::spawn(Generator::new(cfg.gen.clone()).unwrap(), pipeline.clone(), ct, cycles, tx.clone());
    let app = router(AppState {
        engine: Arc::new(engine),
        master: pipeline.master().clone(),
        sim: Some(sim.control()),
        events: tx,
    });
    Live { app, sim, pipeline }
}

#[tokio::test(flavor = "multi_thread")]
async fn pause_freezes_the_watermark() {
    let live = live(10_000, 0.005);
    while live.pipeline.watermark().get() < 3 {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let paused = get_json_post(&live.app, "/sim/pause").await;
    assert_eq!(paused["paused"], true);
    let frozen = get_json(&live.app, "/status").await["watermark"].as_u64().unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert_eq!(get_json(&live.app, "/status").await["watermark"].as_u64().unwrap(), frozen);
    // queries still answer while paused
    get_json(&live.app, &format!("/probe?ts=1&te={frozen}")).await;

    let (status, _) = call(&live.app, "POST", "/sim/rate?rate=0").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&live.app, "POST", "/sim/rate?rate=abc").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(get_json_post(&live.app, "/sim/rate?rate=4").await["rate"], 4.0);

    assert_eq!(get_json_post(&live.app, "/sim/resume").await["paused"], false);
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while live.pipeline.watermark().get() <= frozen {
        assert!(tokio::time::Instant::now() < deadline, "watermark did not advance after resume");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    live.sim.control().stop();
    tokio::task::spawn_blocking(move || live.sim.join()).await.unwrap().unwrap();
}

async fn get_json_post(app: &Router, uri: &str) -> Value {
    let (status, body) = call(app, "POST", uri).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {body}");
    serde_json::from_str(&body).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_pushes_committed_cycles() {
    let live = live(1_000, 0.01);
    let req = Request::builder().uri("/stream").body(Body::empty()).unwrap();
    let resp = live.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");

    let mut body = resp.into_body().into_data_stream();
    let mut text = String::new();
    let mut seen = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while seen.len() < 3 {
        let chunk = tokio::time::timeout_at(deadline, body.next())
            .await
            .expect("stream stalled")
            .expect("stream ended")
            .unwrap();
        text.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = text.find("\n\n") {
            let frame: String = text.drain(..end + 2).collect();
            if !frame.contains("event: cycle") {
                continue;
            }
            let data = frame.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
            let ev: Value = serde_json::from_str(data).unwrap();
            assert!(ev["watermark"].as_u64() >= ev["t"].as_u64());
            assert!(ev["deltas"].is_array());
            seen.push(ev["t"].as_u64().unwrap());
        }
    }
    assert!(seen.windows(2).all(|w| w[1] == w[0] + 1), "{seen:?}");
    live.sim.control().stop();
    tokio::task::spawn_blocking(move || live.sim.join()).await.unwrap().unwrap();
}
