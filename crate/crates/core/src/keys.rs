//! Storage key layouts. All keys are plain text so prefix scans work on any
//! backend.

use crate::domain::{Cycle, Eid, EID_DELIMITER};
use crate::epgrid::Pid;

pub const SEPI_PREFIX: &str = "sepi:";
pub const EPI_PREFIX: &str = "epi:";
pub const ICR_PREFIX: &str = "icr:";
pub const PART_PREFIX: &str = "part:";
pub const EVENT_PREFIX: &str = "ev:";
pub const META_PREFIX: &str = "meta:";

/// Width of zero-padded start cycles inside index keys (fits `u64::MAX`).
pub const STIME_WIDTH: usize = 20;

/// `sepi:<unit>:<oid>|<stime>` with `stime` zero-padded.
pub fn sepi_key(unit: u32, eid: &Eid) -> String {
    format!(
        "{SEPI_PREFIX}{unit}:{}{EID_DELIMITER}{:0width$}",
        eid.oid(),
        eid.stime(),
        width = STIME_WIDTH
    )
}

/// Inverse of [`sepi_key`] (and of the EPI record stem).
pub fn parse_index_key(prefix: &str, key: &str) -> Option<(u32, Eid)> {
    let rest = key.strip_prefix(prefix)?;
    let (unit, eid) = rest.split_once(':')?;
    Some((unit.parse().ok()?, eid.parse().ok()?))
}

pub fn epi_start_key(unit: u32, eid: &Eid) -> String {
    format!("{}:s", epi_stem(unit, eid))
}

pub fn epi_end_key(unit: u32, eid: &Eid) -> String {
    format!("{}:e", epi_stem(unit, eid))
}

fn epi_stem(unit: u32, eid: &Eid) -> String {
    format!(
        "{EPI_PREFIX}{unit}:{}{EID_DELIMITER}{:0width$}",
        eid.oid(),
        eid.stime(),
        width = STIME_WIDTH
    )
}

/// `icr:<unit>:<cell>`
pub fn icr_key(pid: Pid) -> String {
    format!("{ICR_PREFIX}{}:{}", pid.unit, pid.cell)
}

/// `part:<unit>:<cell>`: valid data of one partition, one item per cycle.
pub fn part_key(pid: Pid) -> String {
    format!("{PART_PREFIX}{}:{}", pid.unit, pid.cell)
}

/// `ev:<oid>|<stime>`: full rows of one event, one item per cycle.
pub fn event_key(eid: &Eid) -> String {
    format!("{EVENT_PREFIX}{eid}")
}

pub fn decode_cycle(bytes: &[u8]) -> Option<Cycle> {
    std::str::from_utf8(bytes).ok()?.trim().parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sepi_keys_are_padded_and_parse_back() {
        let eid = Eid::new("oid1", 3).unwrap();
        let key = sepi_key(7, &eid);
        assert_eq!(key, "sepi:7:oid1|00000000000000000003");
        assert_eq!(parse_index_key(SEPI_PREFIX, &key), Some((7, eid)));
        assert!(sepi_key(0, &Eid::new("a", 9).unwrap()) < sepi_key(0, &Eid::new("a", 10).unwrap()));
    }

    #[test]
    fn other_layouts() {
        let pid = Pid::new(1, 42);
        assert_eq!(icr_key(pid), "icr:1:42");
        assert_eq!(part_key(pid), "part:1:42");
        assert_eq!(event_key(&Eid::new("oid3", 5).unwrap()), "ev:oid3|5");
        let eid = Eid::new("x", 2).unwrap();
        let start = epi_start_key(0, &eid);
        let stem = start.strip_suffix(":s").unwrap();
        assert_eq!(parse_index_key(EPI_PREFIX, stem), Some((0, eid)));
    }
}
