//! Value types shared by every stage of the pipeline: catalog rows, events,
//! and the two query operators (`Region`, `TimeInterval`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// Discrete survey cycle index.
pub type Cycle = u64;

/// Currently open events, keyed by object id.
pub type ActiveMap = BTreeMap<String, Eid>;

/// Delimiter between the object id and start cycle inside an event id.
pub const EID_DELIMITER: char = '|';

pub fn validate_oid(oid: &str) -> Result<(), DomainError> {
    if oid.is_empty() {
        return Err(DomainError::InvalidOid("empty object id".into()));
    }
    if oid.contains(EID_DELIMITER) {
        return Err(DomainError::InvalidOid(format!("object id {oid:?} contains '|'")));
    }
    // ',' and newlines are the row delimiters of the stored text layouts
    if oid.contains([',', '\n', '\r']) {
        return Err(DomainError::InvalidOid(format!(
            "object id {oid:?} contains a row delimiter"
        )));
    }
    Ok(())
}

/// One object observation from a catalog: `oid,x,y,t,d1..dm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogTuple {
    pub oid: String,
    pub x: f64,
    pub y: f64,
    pub t: Cycle,
    pub attrs: Vec<f64>,
}

impl CatalogTuple {
    pub fn new(oid: impl Into<String>, x: f64, y: f64, t: Cycle, attrs: Vec<f64>) -> Self {
        Self {
            oid: oid.into(),
            x,
            y,
            t,
            attrs,
        }
    }

    /// Keep the first `c` data attributes.
    pub fn truncate(&self, c: usize) -> ValidTuple {
        ValidTuple {
            oid: self.oid.clone(),
            x: self.x,
            y: self.y,
            t: self.t,
            attrs: self.attrs.iter().take(c).copied().collect(),
        }
    }

    /// Comma-separated text row. Floats use the shortest round-trip form.
    pub fn to_row(&self) -> String {
        encode_row(&self.oid, self.x, self.y, self.t, &self.attrs)
    }

    pub fn parse_row(row: &str) -> Result<Self, DomainError> {
        let (oid, x, y, t, attrs) = decode_row(row)?;
        Ok(Self { oid, x, y, t, attrs })
    }
}

/// A catalog row reduced to its major attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidTuple {
    pub oid: String,
    pub x: f64,
    pub y: f64,
    pub t: Cycle,
    pub attrs: Vec<f64>,
}

impl ValidTuple {
    pub fn to_row(&self) -> String {
        encode_row(&self.oid, self.x, self.y, self.t, &self.attrs)
    }

    pub fn parse_row(row: &str) -> Result<Self, DomainError> {
        let (oid, x, y, t, attrs) = decode_row(row)?;
        Ok(Self { oid, x, y, t, attrs })
    }
}

fn encode_row(oid: &str, x: f64, y: f64, t: Cycle, attrs: &[f64]) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(oid.len() + 24 + attrs.len() * 10);
    let _ = write!(out, "{oid},{x},{y},{t}");
    for a in attrs {
        let _ = write!(out, ",{a}");
    }
    out
}

type DecodedRow = (String, f64, f64, Cycle, Vec<f64>);

fn decode_row(row: &str) -> Result<DecodedRow, DomainError> {
    let bad = |why: &str| DomainError::MalformedRow(format!("{why}: {row:?}"));
    let mut fields = row.trim_end_matches(['\r', '\n']).split(',');
    let oid = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing oid"))?;
    let mut num = |name: &str| -> Result<f64, DomainError> {
        fields
            .next()
            .ok_or_else(|| bad(&format!("missing {name}")))?
            .trim()
            .parse::<f64>()
            .map_err(|_| bad(&format!("bad {name}")))
    };
    let x = num("x")?;
    let y = num("y")?;
    let t_field = fields.next().ok_or_else(|| bad("missing t"))?;
    let t = t_field.trim().parse::<Cycle>().map_err(|_| bad("bad t"))?;
    let attrs = fields
        .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad attribute")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((oid.to_string(), x, y, t, attrs))
}

/// Event identifier `oid|stime`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Eid {
    oid: String,
    stime: Cycle,
}

impl Eid {
    pub fn new(oid: impl Into<String>, stime: Cycle) -> Result<Self, DomainError> {
        let oid = oid.into();
        validate_oid(&oid)?;
        Ok(Self { oid, stime })
    }

    pub fn oid(&self) -> &str {
        &self.oid
    }

    pub fn stime(&self) -> Cycle {
        self.stime
    }
}

impl fmt::Display for Eid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.oid, EID_DELIMITER, self.stime)
    }
}

impl FromStr for Eid {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (oid, stime) = s
            .rsplit_once(EID_DELIMITER)
            .ok_or_else(|| DomainError::InvalidEid(s.to_string()))?;
        let stime = stime
            .parse::<Cycle>()
            .map_err(|_| DomainError::InvalidEid(s.to_string()))?;
        Eid::new(oid, stime).map_err(|_| DomainError::InvalidEid(s.to_string()))
    }
}

impl TryFrom<String> for Eid {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Eid> for String {
    fn from(value: Eid) -> Self {
        value.to_string()
    }
}

/// `<eid, oid, stime, etime>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScientificEvent {
    pub eid: Eid,
    pub stime: Cycle,
    pub etime: Cycle,
}

impl ScientificEvent {
    pub fn new(eid: Eid, etime: Cycle) -> Result<Self, DomainError> {
        if etime < eid.stime() {
            return Err(DomainError::InvalidInterval {
                ts: eid.stime(),
                te: etime,
            });
        }
        Ok(Self {
            stime: eid.stime(),
            eid,
            etime,
        })
    }

    pub fn oid(&self) -> &str {
        self.eid.oid()
    }

    pub fn span(&self) -> TimeInterval {
        TimeInterval {
            ts: self.stime,
            te: self.etime,
        }
    }
}

/// Object ids flagged by the event detector in one cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Eset {
    pub t: Cycle,
    pub oids: Vec<String>,
}

impl Eset {
    pub fn new(t: Cycle, oids: Vec<String>) -> Self {
        Self { t, oids }
    }

    pub fn empty(t: Cycle) -> Self {
        Self { t, oids: Vec::new() }
    }
}

/// Circle search operator `region(x, y, r)`. The boundary is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Region {
    pub fn new(x: f64, y: f64, r: f64) -> Result<Self, DomainError> {
        if !(r > 0.0 && r.is_finite()) || !x.is_finite() || !y.is_finite() {
            return Err(DomainError::InvalidRegion { x, y, r });
        }
        Ok(Self { x, y, r })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.x;
        let dy = y - self.y;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Closed cycle interval `[ts, te]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeInterval {
    pub ts: Cycle,
    pub te: Cycle,
}

impl TimeInterval {
    pub fn new(ts: Cycle, te: Cycle) -> Result<Self, DomainError> {
        if ts > te {
            return Err(DomainError::InvalidInterval { ts, te });
        }
        Ok(Self { ts, te })
    }

    pub fn intersects(&self, other: &TimeInterval) -> bool {
        self.ts.max(other.ts) <= self.te.min(other.te)
    }

    pub fn contains(&self, t: Cycle) -> bool {
        self.ts <= t && t <= self.te
    }
}

/// Free-function form of [`TimeInterval::intersects`].
pub fn intersects(a: &TimeInterval, b: &TimeInterval) -> bool {
    a.intersects(b)
}

/// Free-function form of [`Region::contains`].
pub fn contains(reg: &Region, x: f64, y: f64) -> bool {
    reg.contains(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(ts: u64, te: u64) -> TimeInterval {
        TimeInterval::new(ts, te).unwrap()
    }

    #[test]
    fn interval_intersection_examples() {
        assert!(intersects(&iv(3, 5), &iv(4, 7)));
        assert!(intersects(&iv(2, 2), &iv(2, 2)));
        assert!(!intersects(&iv(1, 3), &iv(4, 7)));
    }

    #[test]
    fn circle_containment_examples() {
        let reg = Region::new(0.0, 0.0, 1.0).unwrap();
        assert!(contains(&reg, 0.0, 0.0));
        assert!(contains(&reg, 1.0, 0.0));
        assert!(!contains(&reg, 0.8, 0.8));
    }

    #[test]
    fn invalid_operators_rejected() {
        assert!(TimeInterval::new(5, 4).is_err());
        assert!(Region::new(0.0, 0.0, 0.0).is_err());
        assert!(Region::new(0.0, 0.0, -1.0).is_err());
        assert!(Region::new(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn eid_rejects_delimiter_in_oid() {
        assert!(Eid::new("a|b", 3).is_err());
        assert!(Eid::new("", 3).is_err());
        assert!("oid1".parse::<Eid>().is_err());
        assert!("oid1|x".parse::<Eid>().is_err());
        let eid: Eid = "oid1|3".parse().unwrap();
        assert_eq!((eid.oid(), eid.stime()), ("oid1", 3));
    }

    #[test]
    fn event_requires_ordered_endpoints() {
        let eid = Eid::new("o", 5).unwrap();
        assert!(ScientificEvent::new(eid.clone(), 4).is_err());
        let ev = ScientificEvent::new(eid, 5).unwrap();
        assert_eq!(ev.span(), iv(5, 5));
    }

    #[test]
    fn row_codec_keeps_every_field() {
        let row = CatalogTuple::new("u0o7", 0.125, 1.0 / 3.0, 12, vec![1.5, -2.0, 0.1]);
        let text = row.to_row();
        assert_eq!(CatalogTuple::parse_row(&text).unwrap(), row);
        let valid = row.truncate(1);
        assert_eq!(valid.attrs, vec![1.5]);
        assert_eq!(ValidTuple::parse_row(&valid.to_row()).unwrap(), valid);
        assert!(CatalogTuple::parse_row("a,1,2").is_err());
        assert!(CatalogTuple::parse_row("a,1,2,x").is_err());
    }

    proptest! {
        #[test]
        fn intersects_is_symmetric(a in 0u64..50, la in 0u64..20, b in 0u64..50, lb in 0u64..20) {
            let x = iv(a, a + la);
            let y = iv(b, b + lb);
            prop_assert_eq!(x.intersects(&y), y.intersects(&x));
            let brute = (a..=a + la).any(|t| y.contains(t));
            prop_assert_eq!(x.intersects(&y), brute);
        }

        #[test]
        fn eid_round_trips(oid in "[a-zA-Z0-9_.:-]{1,16}", stime in any::<u64>()) {
            let eid = Eid::new(oid.clone(), stime).unwrap();
            let parsed: Eid = eid.to_string().parse().unwrap();
            prop_assert_eq!(parsed.oid(), oid.as_str());
            prop_assert_eq!(parsed.stime(), stime);
        }
    }
}
