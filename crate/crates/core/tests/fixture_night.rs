use std::collections::HashSet;

use aserv_core::fixture;
use aserv_core::query::QueryEngine;
use aserv_core::sepi::{EpiIndex, SepiIndex};
use aserv_core::{Eid, IngestConfig, MemoryStore, Pipeline, QueryError, Region, SharedStore, TimeInterval};

fn iv(ts: u64, te: u64) -> TimeInterval {
    TimeInterval::new(ts, te).unwrap()
}

fn eid(s: &str) -> Eid {
    s.parse().unwrap()
}

fn loaded(cfg: IngestConfig) -> (SharedStore, Pipeline, QueryEngine) {
    let store = MemoryStore::new().shared();
    let pipeline = fixture::load(store.clone(), cfg).unwrap();
    let engine = QueryEngine::new(store.clone(), fixture::grids(), pipeline.watermark());
    (store, pipeline, engine)
}

#[test]
fn probe_counts() {
    let (_, pipeline, q) = loaded(IngestConfig::default());
    assert_eq!(pipeline.watermark().get(), fixture::CYCLES);
    assert_eq!(q.probe(None, iv(4, 7)).unwrap(), 3);
    assert_eq!(q.probe(None, iv(1, 2)).unwrap(), 0);
    assert_eq!(q.probe(None, iv(1, 10)).unwrap(), 4);
    assert_eq!(q.probe(None, iv(9, 10)).unwrap(), 0);
    let far = Region::new(50.0, 50.0, 1.0).unwrap();
    assert_eq!(q.probe(Some(&far), iv(1, 10)).unwrap(), 0);
}

#[test]
fn listing_returns_full_series() {
    let (_, _, q) = loaded(IngestConfig::default());
    let listed = q.list_events(None, iv(4, 7)).unwrap();
    let ids: Vec<String> = listed.iter().map(|s| s.event.eid.to_string()).collect();
    assert_eq!(ids, ["oid1|3", "oid2|6", "oid3|5"]);

    let first = &listed[0];
    let ts: Vec<u64> = first.rows.iter().map(|r| r.t).collect();
    assert_eq!(ts, [3, 4, 5]);
    assert!(first.rows.iter().all(|r| r.oid == "oid1" && r.attrs.len() == 3));
    assert_eq!(first.rows[0], fixture::cycle(3).catalog[0]);

    assert!(q.list_events(None, iv(1, 2)).unwrap().is_empty());
    let far = Region::new(50.0, 50.0, 0.01).unwrap();
    assert!(q.list_events(Some(&far), iv(1, 10)).unwrap().is_empty());
}

#[test]
fn listing_filters_on_partition() {
    let (_, _, q) = loaded(IngestConfig::default());
    // lower-left quadrant only holds oid1
    let reg = Region::new(0.2, 0.2, 0.05).unwrap();
    let listed = q.list_events(Some(&reg), iv(1, 10)).unwrap();
    assert_eq!(listed.len(), 1);
    assert_eq!(listed[0].event.oid(), "oid1");
}

#[test]
fn stretching_widens_the_span() {
    let (_, _, q) = loaded(IngestConfig::default());
    let range = q.stretch(&eid("oid3|5"), 1, 1).unwrap();
    assert_eq!(range.interval, iv(4, 7));
    let ts: Vec<u64> = range.rows.iter().map(|r| r.t).collect();
    assert_eq!(ts, [4, 5, 6, 7]);
    assert!(range.rows.iter().all(|r| r.oid == "oid3" && r.attrs.len() == 1));

    let own = q.stretch(&eid("oid3|5"), 0, 0).unwrap();
    let listed = q.list_events(None, iv(5, 6)).unwrap();
    let series = listed.iter().find(|s| s.event.oid() == "oid3").unwrap();
    let projected: Vec<_> = series.rows.iter().map(|r| r.truncate(1)).collect();
    assert_eq!(own.rows, projected);

    let clipped = q.stretch(&eid("oid1|3"), 10, 0).unwrap();
    assert_eq!(clipped.interval, iv(0, 5));
    assert_eq!(clipped.rows.first().map(|r| r.t), Some(1));

    let past_end = q.stretch(&eid("oid2|6"), 0, 50).unwrap();
    assert_eq!(past_end.interval, iv(6, 10));
}

#[test]
fn unknown_events_are_reported() {
    let (_, _, q) = loaded(IngestConfig::default());
    for bad in ["oid3|4", "nobody|1", "oid1|99"] {
        assert!(matches!(q.stretch(&eid(bad), 1, 1), Err(QueryError::UnknownEvent(_))), "{bad}");
    }
}

#[test]
fn pcse_counts_only_inside_the_disk() {
    let (_, _, q) = loaded(IngestConfig::default());
    // selects the two right-hand cells, but both events there lie outside
    let reg = Region::new(0.9, 0.6, 0.15).unwrap();
    let acc = q.accuracy(&reg, iv(5, 6)).unwrap();
    assert_eq!((acc.probe, acc.pcse), (2, 0));
    assert_eq!(acc.accuracy, Some(0.0));

    let centered = Region::new(0.6, 0.8, 0.01).unwrap();
    let acc = q.accuracy(&centered, iv(5, 6)).unwrap();
    assert_eq!((acc.probe, acc.pcse), (1, 1));

    let none = q.accuracy(&centered, iv(1, 2)).unwrap();
    assert_eq!(none.accuracy, None);
}

#[test]
fn readers_stop_at_the_watermark() {
    let (store, _, _) = loaded(IngestConfig::default());
    let q = QueryEngine::new(store, fixture::grids(), aserv_core::Watermark::fixed(5));
    assert_eq!(q.probe(None, iv(4, 7)).unwrap(), 2);
    let listed = q.list_events(None, iv(4, 7)).unwrap();
    let spans: Vec<(String, u64, u64)> = listed
        .iter()
        .map(|s| (s.event.eid.to_string(), s.event.stime, s.event.etime))
        .collect();
    assert_eq!(spans, [("oid1|3".to_string(), 3, 5), ("oid3|5".to_string(), 5, 5)]);
    assert_eq!(listed[1].rows.len(), 1);
    let range = q.stretch(&eid("oid3|5"), 1, 1).unwrap();
    assert_eq!(range.interval, iv(4, 5));
    assert!(matches!(q.stretch(&eid("oid2|6"), 0, 0), Err(QueryError::UnknownEvent(_))));

    let empty = QueryEngine::new(q.store().clone(), fixture::grids(), aserv_core::Watermark::new());
    assert_eq!(empty.probe(None, iv(1, 10)).unwrap(), 0);
    assert!(empty.list_events(None, iv(1, 10)).unwrap().is_empty());
}

#[test]
fn both_indexes_agree_on_the_fixture() {
    let cfg = IngestConfig {
        maintain_epi: true,
        ..IngestConfig::default()
    };
    let (store, _, _) = loaded(cfg);
    let sepi = SepiIndex::new(store.as_ref());
    let epi = EpiIndex::new(store.as_ref());
    assert_eq!(sepi.entry_count().unwrap(), 4);
    assert_eq!(epi.entry_count().unwrap(), 8);
    for ts in 1..=10 {
        for te in ts..=10 {
            let a: HashSet<_> = sepi.query(iv(ts, te), 10).unwrap().into_iter().collect();
            let b: HashSet<_> = epi.query(iv(ts, te), 10).unwrap().into_iter().collect();
            assert_eq!(a, b, "[{ts}, {te}]");
        }
    }
}
