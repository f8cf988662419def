//! A small hand-made night: one unit, three objects, ten cycles.
//!
//! | event     | span   |
//! |-----------|--------|
//! | `oid1|3`  | [3, 5] |
//! | `oid2|3`  | [3, 3] |
//! | `oid2|6`  | [6, 8] |
//! | `oid3|5`  | [5, 6] |
//!
//! Probing [4, 7] over the whole unit counts 3, [1, 2] counts 0, and
//! stretching `oid3|5` by one cycle on each side covers t4..t7.

use crate::domain::{CatalogTuple, Cycle, Eset};
use crate::epgrid::{GridSet, PartitionGrid};
use crate::error::IngestError;
use crate::ingest::{CycleBatch, IngestConfig, Pipeline};
use crate::storage::SharedStore;

pub const CYCLES: Cycle = 10;

pub const OBJECTS: [(&str, f64, f64); 3] = [("oid1", 0.2, 0.3), ("oid2", 0.7, 0.2), ("oid3", 0.6, 0.8)];

const SPANS: [(&str, Cycle, Cycle); 4] = [("oid1", 3, 5), ("oid2", 3, 3), ("oid2", 6, 8), ("oid3", 5, 6)];

pub fn grids() -> GridSet {
    GridSet::new(vec![PartitionGrid::with_shape(0, (0.0, 0.0), 1.0, 2, 2).expect("valid shape")])
}

pub fn cycle(t: Cycle) -> CycleBatch {
    let catalog = OBJECTS
        .iter()
        .enumerate()
        .map(|(i, &(oid, x, y))| {
            let base = (i as f64 + 1.0) * 10.0 + t as f64 / 10.0;
            CatalogTuple::new(oid, x, y, t, vec![base, base + 0.5, base + 0.25])
        })
        .collect();
    let oids = SPANS
        .iter()
        .filter(|(_, s, e)| (*s..=*e).contains(&t))
        .map(|(oid, _, _)| oid.to_string())
        .collect();
    CycleBatch {
        unit: 0,
        t,
        catalog,
        eset: Eset::new(t, oids),
    }
}

/// Ingest all ten cycles into `store`.
pub fn load(store: SharedStore, cfg: IngestConfig) -> Result<Pipeline, IngestError> {
    let pipeline = Pipeline::new(store, grids(), cfg)?;
    for t in 1..=CYCLES {
        let report = pipeline.process(&[cycle(t)]);
        if let Some(f) = report.failures.first() {
            return Err(IngestError::BadFile {
                path: format!("fixture cycle {}", f.t),
                why: f.error.clone(),
            });
        }
    }
    Ok(pipeline)
}
