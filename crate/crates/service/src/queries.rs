//! Query requests shared by the CLI and the HTTP API, so both produce the
//! same JSON for the same request.

use std::collections::BTreeMap;

use serde::Serialize;

use aserv_core::query::QueryEngine;
use aserv_core::{CatalogTuple, Cycle, Eid, QueryError, Region, TimeInterval, ValidTuple};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::BadRequest(_) => 400,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) => 409,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> String {
        serde_json::json!({ "error": self.to_string() }).to_string()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::UnknownEvent(_) => ApiError::NotFound(e.to_string()),
            QueryError::Domain(_) => ApiError::BadRequest(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryRequest {
    Probe { interval: TimeInterval, region: Option<Region> },
    List { interval: TimeInterval, region: Option<Region> },
    Stretch { eid: Eid, dt1: Cycle, dt2: Cycle },
    Accuracy { interval: TimeInterval, region: Region },
}

fn field<T: std::str::FromStr>(params: &BTreeMap<String, String>, name: &str) -> Result<Option<T>, ApiError> {
    params
        .get(name)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::BadRequest(format!("invalid value {v:?} for {name}")))
        })
        .transpose()
}

fn required<T: std::str::FromStr>(params: &BTreeMap<String, String>, name: &str) -> Result<T, ApiError> {
    field(params, name)?.ok_or_else(|| ApiError::BadRequest(format!("missing parameter {name}")))
}

fn interval(params: &BTreeMap<String, String>) -> Result<TimeInterval, ApiError> {
    TimeInterval::new(required(params, "ts")?, required(params, "te")?)
        .map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn region(params: &BTreeMap<String, String>) -> Result<Option<Region>, ApiError> {
    let parts: [Option<f64>; 3] = [field(params, "x")?, field(params, "y")?, field(params, "r")?];
    match parts {
        [None, None, None] => Ok(None),
        [Some(x), Some(y), Some(r)] => Region::new(x, y, r)
            .map(Some)
            .map_err(|e| ApiError::BadRequest(e.to_string())),
        _ => Err(ApiError::BadRequest("region needs all of x, y, r".into())),
    }
}

impl QueryRequest {
    pub fn from_params(kind: &str, params: &BTreeMap<String, String>) -> Result<Self, ApiError> {
        Ok(match kind {
            "probe" => QueryRequest::Probe {
                interval: interval(params)?,
                region: region(params)?,
            },
            "list" => QueryRequest::List {
                interval: interval(params)?,
                region: region(params)?,
            },
            "stretch" => {
                let raw: String = required(params, "eid")?;
                let eid = raw
                    .parse()
                    .map_err(|e| ApiError::BadRequest(format!("{e}")))?;
                QueryRequest::Stretch {
                    eid,
                    dt1: field(params, "dt1")?.unwrap_or(0),
                    dt2: field(params, "dt2")?.unwrap_or(0),
                }
            }
            "accuracy" => QueryRequest::Accuracy {
                interval: interval(params)?,
                region: region(params)?
                    .ok_or_else(|| ApiError::BadRequest("accuracy needs a region (x, y, r)".into()))?,
            },
            other => return Err(ApiError::NotFound(format!("unknown query {other:?}"))),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            QueryRequest::Probe { .. } => "probe",
            QueryRequest::List { .. } => "list",
            QueryRequest::Stretch { .. } => "stretch",
            QueryRequest::Accuracy { .. } => "accuracy",
        }
    }

    /// Query-string pairs that parse back to this request.
    pub fn params(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let push_region = |out: &mut Vec<_>, r: &Region| {
            out.push(("x", r.x.to_string()));
            out.push(("y", r.y.to_string()));
            out.push(("r", r.r.to_string()));
        };
        match self {
            QueryRequest::Probe { interval, region } | QueryRequest::List { interval, region } => {
                out.push(("ts", interval.ts.to_string()));
                out.push(("te", interval.te.to_string()));
                if let Some(r) = region {
                    push_region(&mut out, r);
                }
            }
            QueryRequest::Accuracy { interval, region } => {
                out.push(("ts", interval.ts.to_string()));
                out.push(("te", interval.te.to_string()));
                push_region(&mut out, region);
            }
            QueryRequest::Stretch { eid, dt1, dt2 } => {
                out.push(("eid", eid.to_string()));
                out.push(("dt1", dt1.to_string()));
                out.push(("dt2", dt2.to_string()));
            }
        }
        out
    }
}

#[derive(Debug, Serialize)]
struct ProbeOut {
    count: u64,
}

#[derive(Debug, Serialize)]
struct EventOut {
    eid: String,
    unit: u32,
    stime: Cycle,
    etime: Cycle,
    pid: String,
    rows: Vec<CatalogTuple>,
}

#[derive(Debug, Serialize)]
struct ListOut {
    count: usize,
    events: Vec<EventOut>,
}

#[derive(Debug, Serialize)]
struct StretchOut {
    eid: String,
    oid: String,
    pid: String,
    ts: Cycle,
    te: Cycle,
    rows: Vec<ValidTuple>,
}

/// Run a request and render its JSON body.
pub fn execute(engine: &QueryEngine, req: &QueryRequest) -> Result<String, ApiError> {
    let json = match req {
        QueryRequest::Probe { interval, region } => serde_json::to_string(&ProbeOut {
            count: engine.probe(region.as_ref(), *interval)?,
        }),
        QueryRequest::List { interval, region } => {
            let events: Vec<EventOut> = engine
                .list_events(region.as_ref(), *interval)?
                .into_iter()
                .map(|s| EventOut {
                    eid: s.event.eid.to_string(),
                    unit: s.unit,
                    stime: s.event.stime,
                    etime: s.event.etime,
                    pid: s.pid.to_string(),
                    rows: s.rows,
                })
                .collect();
            serde_json::to_string(&ListOut {
                count: events.len(),
                events,
            })
        }
        QueryRequest::Stretch { eid, dt1, dt2 } => {
            let range = engine.stretch(eid, *dt1, *dt2)?;
            serde_json::to_string(&StretchOut {
                eid: range.eid.to_string(),
                oid: range.oid,
                pid: range.pid.to_string(),
                ts: range.interval.ts,
                te: range.interval.te,
                rows: range.rows,
            })
        }
        QueryRequest::Accuracy { interval, region } => serde_json::to_string(&engine.accuracy(region, *interval)?),
    };
    json.map_err(|e| ApiError::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parse_and_render_round_trip() {
        let reqs = [
            ("probe", params(&[("ts", "4"), ("te", "7")])),
            ("list", params(&[("ts", "1"), ("te", "2"), ("x", "0.5"), ("y", "0.25"), ("r", "0.1")])),
            ("stretch", params(&[("eid", "oid3|5"), ("dt1", "1"), ("dt2", "1")])),
            ("accuracy", params(&[("ts", "1"), ("te", "2"), ("x", "0.5"), ("y", "0.25"), ("r", "0.1")])),
        ];
        for (kind, p) in reqs {
            let req = QueryRequest::from_params(kind, &p).unwrap();
            assert_eq!(req.kind(), kind);
            let back: BTreeMap<String, String> =
                req.params().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            assert_eq!(QueryRequest::from_params(kind, &back).unwrap(), req);
        }
    }

    #[test]
    fn invalid_parameters_are_bad_requests() {
        let bad = [
            ("probe", params(&[("ts", "7"), ("te", "4")])),
            ("probe", params(&[("ts", "x"), ("te", "4")])),
            ("probe", params(&[("te", "4")])),
            ("probe", params(&[("ts", "1"), ("te", "4"), ("x", "1")])),
            ("list", params(&[("ts", "1"), ("te", "4"), ("x", "1"), ("y", "1"), ("r", "-1")])),
            ("stretch", params(&[("eid", "no-delimiter")])),
            ("stretch", params(&[("eid", "a|1"), ("dt1", "-1")])),
            ("accuracy", params(&[("ts", "1"), ("te", "4")])),
        ];
        for (kind, p) in bad {
            let err = QueryRequest::from_params(kind, &p).unwrap_err();
            assert_eq!(err.status(), 400, "{kind} {p:?}");
        }
        assert_eq!(QueryRequest::from_params("nope", &params(&[])).unwrap_err().status(), 404);
    }
}
