use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use futures::stream::{self, Stream};
use serde::Serialize;
use tokio::sync::broadcast;

use aserv_core::ingest::{Master, UnitStatus};
use aserv_core::query::QueryEngine;
use aserv_core::{Cycle, KvBackend};

use crate::queries::{execute, ApiError, QueryRequest};
use crate::sim::{CycleEvent, SimControl, SimStatus};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<QueryEngine>,
    pub master: Arc<Master>,
    pub sim: Option<Arc<SimControl>>,
    pub events: broadcast::Sender<CycleEvent>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, [(header::CONTENT_TYPE, "application/json")], self.body()).into_response()
    }
}

fn json_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn to_json<T: Serialize>(value: &T) -> Result<Response, ApiError> {
    serde_json::to_string(value)
        .map(json_body)
        .map_err(|e| ApiError::Internal(e.to_string()))
}

#[derive(Debug, Serialize)]
struct Status {
    watermark: Cycle,
    key_count: u64,
    units: Vec<UnitStatus>,
    sim: Option<SimStatus>,
}

async fn status(State(app): State<AppState>) -> Result<Response, ApiError> {
    let key_count = {
        let store = app.engine.store().clone();
        tokio::task::spawn_blocking(move || store.key_count())
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .map_err(|e| ApiError::Internal(e.to_string()))?
    };
    to_json(&Status {
        watermark: app.engine.watermark(),
        key_count,
        units: app.master.units(),
        sim: app.sim.as_ref().map(|s| s.status()),
    })
}

async fn query(
    State(app): State<AppState>,
    Path(kind): Path<String>,
    Query(params): Query<BTreeMap<String, String>>,
) -> Result<Response, ApiError> {
    let req = QueryRequest::from_params(&kind, &params)?;
    let engine = app.engine.clone();
    let body = tokio::task::spawn_blocking(move || execute(&engine, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(json_body(body))
}

fn sim(app: &AppState) -> Result<&SimControl, ApiError> {
    app.sim
        .as_deref()
        .ok_or_else(|| ApiError::Conflict("no simulation attached".into()))
}

async fn steer(
    app: AppState,
    f: impl FnOnce(&SimControl) -> Result<SimStatus, ApiError> + Send + 'static,
) -> Result<Response, ApiError> {
    sim(&app)?;
    // pausing waits for the cycle in flight
    let status = tokio::task::spawn_blocking(move || f(app.sim.as_deref().expect("checked above")))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    to_json(&status)
}

async fn pause(State(app): State<AppState>) -> Result<Response, ApiError> {
    steer(app, SimControl::pause).await
}

async fn resume(State(app): State<AppState>) -> Result<Response, ApiError> {
    steer(app, SimControl::resume).await
}

async fn rate(
    State(app): State<AppState>,
    Query(params): Query<BTreeMap<String, String>>,
) -> Result<Response, ApiError> {
    let raw = params
        .get("rate")
        .ok_or_else(|| ApiError::BadRequest("missing parameter rate".into()))?;
    let rate: f64 = raw
        .parse()
        .map_err(|_| ApiError::BadRequest(format!("invalid value {raw:?} for rate")))?;
    steer(app, move |s| s.set_rate(rate)).await
}

fn cycle_stream(rx: broadcast::Receiver<CycleEvent>) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let data = serde_json::to_string(&ev).expect("cycle events serialize");
                    let event = Event::default().event("cycle").id(ev.t.to_string()).data(data);
                    return Some((Ok(event), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("stream subscriber skipped {n} cycles");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn events(State(app): State<AppState>) -> impl IntoResponse {
    Sse::new(cycle_stream(app.events.subscribe())).keep_alive(KeepAlive::default())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/stream", get(events))
        .route("/sim/pause", post(pause))
        .route("/sim/resume", post(resume))
        .route("/sim/rate", post(rate))
        .route("/{kind}", get(query))
        .with_state(state)
}
