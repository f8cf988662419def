//! Domain-aware filter: every catalog row is reduced to its `c` major
//! attributes, while rows of flagged objects are kept whole as event data.

use std::collections::{BTreeMap, HashSet};

use crate::domain::{ActiveMap, CatalogTuple, Eid, Eset, ValidTuple};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutput {
    pub valid: Vec<ValidTuple>,
    /// Full rows appended to each event this cycle.
    pub event_rows: BTreeMap<Eid, CatalogTuple>,
    /// Flagged oids with no catalog row this cycle.
    pub missing: usize,
}

/// Split one unit's catalog for cycle `eset.t`. Flagged objects already in
/// `active` continue their event; others open `oid|t`.
pub fn filter_cycle(
    catalog: &[CatalogTuple],
    eset: &Eset,
    active: &ActiveMap,
    c: usize,
) -> FilterOutput {
    let valid = catalog.iter().map(|row| row.truncate(c)).collect();

    let flagged: HashSet<&str> = eset.oids.iter().map(String::as_str).collect();
    let mut event_rows = BTreeMap::new();
    let mut seen = HashSet::with_capacity(flagged.len());
    for row in catalog {
        if !flagged.contains(row.oid.as_str()) || !seen.insert(row.oid.as_str()) {
            continue;
        }
        let eid = match active.get(&row.oid) {
            Some(eid) => eid.clone(),
            None => match Eid::new(row.oid.clone(), eset.t) {
                Ok(eid) => eid,
                Err(e) => {
                    log::warn!("skipping flagged row: {e}");
                    continue;
                }
            },
        };
        event_rows.insert(eid, row.clone());
    }

    let missing = flagged.len() - seen.len();
    if missing > 0 {
        log::warn!(
            "cycle {}: {missing} flagged object(s) missing from the catalog",
            eset.t
        );
    }
    FilterOutput {
        valid,
        event_rows,
        missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(t: u64, m: usize) -> Vec<CatalogTuple> {
        (1..=3)
            .map(|i| {
                let attrs = (0..m).map(|k| (i * 100 + k) as f64).collect();
                CatalogTuple::new(format!("oid{i}"), 0.1 * i as f64, 0.2, t, attrs)
            })
            .collect()
    }

    #[test]
    fn empty_eset_keeps_only_valid_data() {
        let rows = catalog(1, 25);
        let out = filter_cycle(&rows, &Eset::empty(1), &ActiveMap::new(), 1);
        assert_eq!(out.valid.len(), 3);
        assert!(out.valid.iter().all(|v| v.attrs.len() == 1));
        assert!(out.event_rows.is_empty());
    }

    #[test]
    fn new_event_is_keyed_by_start_cycle() {
        let rows = catalog(3, 25);
        let eset = Eset::new(3, vec!["oid1".into()]);
        let out = filter_cycle(&rows, &eset, &ActiveMap::new(), 1);
        let eid = Eid::new("oid1", 3).unwrap();
        assert_eq!(out.event_rows.len(), 1);
        assert_eq!(out.event_rows[&eid], rows[0]);
        assert_eq!(out.event_rows[&eid].attrs.len(), 25);
    }

    #[test]
    fn continuing_event_keeps_its_eid() {
        let rows = catalog(4, 25);
        let eid = Eid::new("oid1", 3).unwrap();
        let active = ActiveMap::from([("oid1".to_string(), eid.clone())]);
        let eset = Eset::new(4, vec!["oid1".into()]);
        let out = filter_cycle(&rows, &eset, &active, 1);
        assert_eq!(out.event_rows.keys().collect::<Vec<_>>(), vec![&eid]);
        assert_eq!(out.event_rows[&eid].t, 4);
    }

    #[test]
    fn flagged_object_without_row_is_counted() {
        let rows = catalog(2, 4);
        let eset = Eset::new(2, vec!["oid2".into(), "ghost".into()]);
        let out = filter_cycle(&rows, &eset, &ActiveMap::new(), 2);
        assert_eq!(out.missing, 1);
        assert_eq!(out.event_rows.len(), 1);
        assert_eq!(out.valid[1].attrs, vec![200.0, 201.0]);
    }

    #[test]
    fn valid_rows_shrink_by_field_count() {
        let rows = catalog(1, 21);
        let out = filter_cycle(&rows, &Eset::empty(1), &ActiveMap::new(), 1);
        let raw: usize = rows.iter().map(|r| 4 + r.attrs.len()).sum();
        let kept: usize = out.valid.iter().map(|r| 4 + r.attrs.len()).sum();
        assert_eq!(kept * 25, raw * 5);
    }
}
