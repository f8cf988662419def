//! Online analysis of transient scientific events in periodic survey data.
//!
//! Each cycle, every observation unit delivers a catalog of object
//! observations and the set of objects its detector flagged. Ingestion keeps
//! a reduced copy of every row, the full rows of flagged objects, an interval
//! index with one entry per event, and per-partition counts, all in a
//! key-list store. Queries then count events in a region and time range
//! (probing), fetch their series (listing), or widen one event's time range
//! (stretching).

pub mod dafilter;
pub mod datagen;
pub mod domain;
pub mod epgrid;
pub mod error;
pub mod fixture;
pub mod ingest;
pub mod keys;
pub mod pcag;
pub mod perf_model;
pub mod query;
pub mod sepi;
pub mod storage;

pub use domain::{CatalogTuple, Cycle, Eid, Eset, Region, ScientificEvent, TimeInterval, ValidTuple};
pub use epgrid::{grid_number, GridSet, PartitionGrid, Pid};
pub use error::{DomainError, GridError, IngestError, ModelError, QueryError, StoreError};
pub use ingest::{CycleBatch, IngestConfig, Master, Pipeline, Watermark, Worker};
pub use query::QueryEngine;
pub use storage::{KvBackend, MemoryStore, RespStore, SharedStore};
