use thiserror::Error;

use crate::domain::Cycle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid object id: {0}")]
    InvalidOid(String),
    #[error("invalid event id {0:?}, expected <oid>|<stime>")]
    InvalidEid(String),
    #[error("invalid time interval [{ts}, {te}]")]
    InvalidInterval { ts: Cycle, te: Cycle },
    #[error("invalid region ({x}, {y}, r={r})")]
    InvalidRegion { x: f64, y: f64, r: f64 },
    #[error("malformed row {0}")]
    MalformedRow(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("accuracy must lie in (0, 1), got {0}")]
    Accuracy(f64),
    #[error("search radius must be positive, got {0}")]
    Radius(f64),
    #[error("sub-area must be positive, got {0}")]
    Area(f64),
    #[error("grid needs at least one cell per axis, got {gx}x{gy}")]
    Shape { gx: u32, gy: u32 },
    #[error("grid number {0} exceeds the supported cell count")]
    TooManyCells(f64),
    #[error("point ({x}, {y}) lies outside unit {unit}")]
    OutOfArea { unit: u32, x: f64, y: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("item of {size} bytes exceeds the {limit}-byte limit")]
    Oversized { size: usize, limit: usize },
    #[error("empty key")]
    EmptyKey,
    #[error("key {0:?} holds a value of the wrong kind")]
    WrongType(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("corrupt value under {key:?}: {why}")]
    Corrupt { key: String, why: String },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unit {unit} expected cycle {expected}, got {got}")]
    OutOfOrder { unit: u32, expected: Cycle, got: Cycle },
    #[error("batch for unit {unit} mixes cycles (batch t={t}, row t={row_t})")]
    MixedCycle { unit: u32, t: Cycle, row_t: Cycle },
    #[error("unit {0} is already registered")]
    DuplicateWorker(u32),
    #[error("unit {0} is not registered")]
    UnknownWorker(u32),
    #[error("store write for unit {unit} cycle {t} failed after {attempts} attempts: {source}")]
    Store {
        unit: u32,
        t: Cycle,
        attempts: u32,
        #[source]
        source: StoreError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad input file {path}: {why}")]
    BadFile { path: String, why: String },
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("unknown event {0}")]
    UnknownEvent(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("need at least two distinct cluster sizes to fit the overhead line")]
    Degenerate,
    #[error("actual latency must be positive, got {0}")]
    NonPositiveActual(f64),
    #[error("training data: {0}")]
    Training(String),
    #[error("measurement setup failed: {0}")]
    Setup(String),
}
